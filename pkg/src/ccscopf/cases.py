"""Built-in instances: the modified 33-bus feeder and two small synthetic cases."""

from __future__ import annotations

import math
from importlib import resources

import numpy as np

from .case_model import DG, LOAD, Branch, Bus, DroopDG, MicrogridCase, ResUnit, load_case, scale_loads

# feeder branches: from, to, r (ohm), x (ohm)
FEEDER_33_BRANCHES = (
    (1, 2, 0.0922, 0.0470), (2, 3, 0.4930, 0.2511), (3, 4, 0.3660, 0.1864), (4, 5, 0.3811, 0.1941),
    (5, 6, 0.8190, 0.7070), (6, 7, 0.1872, 0.6188), (7, 8, 0.7114, 0.2351), (8, 9, 1.0300, 0.7400),
    (9, 10, 1.0440, 0.7400), (10, 11, 0.1966, 0.0650), (11, 12, 0.3744, 0.1238), (12, 13, 1.4680, 1.1550),
    (13, 14, 0.5416, 0.7129), (14, 15, 0.5910, 0.5260), (15, 16, 0.7463, 0.5450), (16, 17, 1.2890, 1.7210),
    (17, 18, 0.7320, 0.5740), (2, 19, 0.1640, 0.1565), (19, 20, 1.5042, 1.3554), (20, 21, 0.4095, 0.4784),
    (21, 22, 0.7089, 0.9373), (3, 23, 0.4512, 0.3083), (23, 24, 0.8980, 0.7091), (24, 25, 0.8960, 0.7011),
    (6, 26, 0.2030, 0.1034), (26, 27, 0.2842, 0.1447), (27, 28, 1.0590, 0.9337), (28, 29, 0.8042, 0.7006),
    (29, 30, 0.5075, 0.2585), (30, 31, 0.9744, 0.9630), (31, 32, 0.3105, 0.3619), (32, 33, 0.3410, 0.5302),
)
# bus loads in kW / kvar
FEEDER_33_LOAD_P = (0, 100, 90, 120, 60, 60, 200, 200, 60, 60, 45, 60, 60, 120, 60, 60, 60, 90, 90, 90,
                    90, 90, 90, 420, 420, 60, 60, 60, 120, 200, 150, 210, 60)
FEEDER_33_LOAD_Q = (0, 60, 40, 80, 30, 20, 100, 100, 20, 20, 30, 35, 35, 80, 10, 20, 20, 40, 40, 40,
                    40, 40, 50, 200, 200, 25, 25, 20, 70, 600, 70, 100, 40)
FEEDER_33_KV = 12.66

DG_BUSES_33 = (1, 7, 11, 14, 21, 23, 32)
WT_BUSES_33 = (5, 16, 22, 25, 28)
# quadratic fuel costs per DG in physical units: a2 $/MW^2h, a1 $/MWh, a0 $/h
# (cheapest units sit where extra output lowers the stability margin, so economics and stability conflict)
COSTS_33_MW = (
    (30.0, 26.0, 1.0), (25.0, 21.0, 1.0), (40.0, 32.0, 1.0), (45.0, 35.0, 1.0),
    (35.0, 28.0, 1.0), (30.0, 24.0, 1.0), (20.0, 18.0, 1.0),
)


def modified_33bus(
    s_base: float = 183.0,
    load_scale: float = 0.2,
    wt_forecast_mw: float = 0.3,
    wt_q_ratio: float = 0.1,
    kp: float = 1.3,
    kq: float = 7.8,
    f_corner: float = 20.0,
    p_max_mw: float = 0.3,
    q_max_mvar: float = 0.2,
    v_limits: tuple[float, float] = (0.95, 1.05),
    costs_mw=COSTS_33_MW,
) -> MicrogridCase:
    """33-bus feeder, islanded: droop DGs replace the substation, loads and WT output scaled.

    Frequencies are in rad/s (``kp`` in rad/s per unit power).  Set-points
    default to an even split of the net load at unit voltage.
    """
    zb = FEEDER_33_KV**2 / s_base
    dg_set = set(DG_BUSES_33)
    buses = tuple(
        Bus(
            id=i + 1,
            kind=DG if i + 1 in dg_set else LOAD,
            load_p=FEEDER_33_LOAD_P[i] / 1000.0 / s_base,
            load_q=FEEDER_33_LOAD_Q[i] / 1000.0 / s_base,
            v_min=v_limits[0],
            v_max=v_limits[1],
        )
        for i in range(33)
    )
    branches = tuple(Branch(f, t, r / zb, x / zb) for f, t, r, x in FEEDER_33_BRANCHES)
    res = tuple(ResUnit(bus=b, p_forecast=wt_forecast_mw / s_base, q_ratio=wt_q_ratio) for b in WT_BUSES_33)
    net_p = sum(FEEDER_33_LOAD_P) / 1000.0 / s_base - len(res) * wt_forecast_mw / s_base
    net_q = sum(FEEDER_33_LOAD_Q) / 1000.0 / s_base - len(res) * wt_q_ratio * wt_forecast_mw / s_base
    g = len(DG_BUSES_33)
    dgs = tuple(
        DroopDG(
            bus=b,
            kp=kp,
            kq=kq,
            fp=f_corner,
            fq=f_corner,
            p_set=load_scale * net_p / g,
            q_set=load_scale * net_q / g,
            v_set=1.0,
            p_min=0.0,
            p_max=p_max_mw / s_base,
            q_min=-q_max_mvar / s_base,
            q_max=q_max_mvar / s_base,
            cost=(costs_mw[k][0] * s_base**2, costs_mw[k][1] * s_base, costs_mw[k][2]),
        )
        for k, b in enumerate(DG_BUSES_33)
    )
    omega = 120.0 * math.pi
    case = MicrogridCase(
        buses=buses,
        branches=branches,
        dgs=dgs,
        res_units=res,
        s_base=s_base,
        omega_base=omega,
        omega_set=omega,
        frequency_unit="rad/s",
        name="modified-33bus",
    )
    return scale_loads(case, load_scale) if load_scale != 1.0 else case


def two_bus(load_p: float = 0.1, load_q: float = 0.05, r: float = 0.02, x: float = 0.1) -> MicrogridCase:
    """One droop DG feeding one load bus."""
    return MicrogridCase(
        buses=(Bus(1, DG), Bus(2, LOAD, load_p, load_q)),
        branches=(Branch(1, 2, r, x),),
        dgs=(DroopDG(1, kp=0.05, kq=0.05, fp=30.0, fq=30.0, p_set=load_p, q_set=load_q, p_max=1.0,
                     cost=(1.0, 1.0, 0.0)),),
        name="two-bus",
    )


def five_bus(lossless: bool = False) -> MicrogridCase:
    """Meshed 5-bus system with three DGs, two load buses and one RES unit."""
    rs = 0.0 if lossless else 1.0
    lines = ((1, 2, 0.02, 0.06), (1, 3, 0.08, 0.24), (2, 3, 0.06, 0.18), (2, 4, 0.06, 0.18),
             (3, 4, 0.01, 0.03), (4, 5, 0.08, 0.24), (2, 5, 0.04, 0.12))
    buses = (
        Bus(1, DG), Bus(2, LOAD, 0.20, 0.10), Bus(3, DG, 0.05, 0.02),
        Bus(4, LOAD, 0.30, 0.12), Bus(5, DG),
    )
    dgs = tuple(
        DroopDG(b, kp=kp, kq=kq, fp=25.0, fq=15.0, p_set=0.15, q_set=0.08, v_set=1.0, p_max=0.6,
                q_min=-0.4, q_max=0.4, cost=c)
        for b, kp, kq, c in ((1, 0.04, 0.05, (2.0, 1.0, 0.0)), (3, 0.05, 0.04, (3.0, 1.5, 0.0)),
                             (5, 0.06, 0.06, (2.5, 1.2, 0.0)))
    )
    return MicrogridCase(
        buses=buses,
        branches=tuple(Branch(f, t, rs * r, x, 0.02 if not lossless else 0.0) for f, t, r, x in lines),
        dgs=dgs,
        res_units=(ResUnit(4, 0.1, 0.2),),
        name="five-bus-lossless" if lossless else "five-bus",
    )


def bundled_case(name: str = "ieee33_modified") -> MicrogridCase:
    """Load one of the case files shipped in ``ccscopf/data``."""
    ref = resources.files("ccscopf") / "data" / f"{name}.json"
    with resources.as_file(ref) as p:
        return load_case(p)


def wt_forecast_vector(case: MicrogridCase) -> np.ndarray:
    return np.array([r.p_forecast for r in case.res_units])
