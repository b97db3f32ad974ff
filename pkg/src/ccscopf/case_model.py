"""Microgrid problem instances: types, validation, file I/O and the bus admittance matrix.

Everything here is per-unit on ``s_base``.  Cases are immutable; the derived
network data used by the numerical modules is cached on first access.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

DG = "DG"
LOAD = "LOAD"

FREQ_PU = "pu"
FREQ_RAD = "rad/s"


class CaseValidationError(ValueError):
    """Raised when a case violates a structural invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = LOAD
    load_p: float = 0.0
    load_q: float = 0.0
    v_min: float = 0.95
    v_max: float = 1.05


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    status: bool = True


@dataclass(frozen=True)
class DroopDG:
    bus: int
    kp: float
    kq: float
    fp: float
    fq: float
    p_set: float = 0.0
    q_set: float = 0.0
    v_set: float = 1.0
    p_min: float = 0.0
    p_max: float = 1.0
    q_min: float = -1.0
    q_max: float = 1.0
    cost: tuple[float, float, float] = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class ResUnit:
    bus: int
    p_forecast: float
    q_ratio: float = 0.0


@dataclass(frozen=True)
class AdmittanceMatrix:
    g: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class MicrogridCase:
    """A validated islanded microgrid.

    ``frequency_unit`` fixes how droop gains are read.  With ``"pu"`` the
    frequency states are per-unit and angle rates carry the factor
    ``omega_base``; with ``"rad/s"`` frequencies are in rad/s, ``kp`` is in
    rad/s per unit power and the angle-rate coefficient is 1.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    dgs: tuple[DroopDG, ...]
    res_units: tuple[ResUnit, ...] = ()
    s_base: float = 1.0
    omega_base: float = 120.0 * math.pi
    omega_set: float = 1.0
    frequency_unit: str = FREQ_PU
    ref_bus: int = 1
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "dgs", tuple(sorted(self.dgs, key=lambda d: d.bus)))
        object.__setattr__(self, "res_units", tuple(self.res_units))
        validate_case(self)

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def g(self) -> int:
        return len(self.dgs)

    @property
    def n_res(self) -> int:
        return len(self.res_units)

    @property
    def n_load_buses(self) -> int:
        return self.n - self.g

    @property
    def angle_rate(self) -> float:
        """Coefficient multiplying frequency deviations in the angle dynamics."""
        return self.omega_base if self.frequency_unit == FREQ_PU else 1.0

    def z_default(self) -> np.ndarray:
        """Set-points stored in the case, ordered [P*, Q*, V*] by ascending DG bus."""
        return np.array(
            [d.p_set for d in self.dgs] + [d.q_set for d in self.dgs] + [d.v_set for d in self.dgs]
        )

    def with_setpoints(self, z) -> "MicrogridCase":
        z = np.asarray(z, dtype=float)
        g = self.g
        if z.shape != (3 * g,):
            raise ValueError(f"set-point vector must have length {3 * g}, got {z.shape}")
        dgs = tuple(
            replace(d, p_set=float(z[i]), q_set=float(z[g + i]), v_set=float(z[2 * g + i]))
            for i, d in enumerate(self.dgs)
        )
        return replace(self, dgs=dgs)

    @cached_property
    def network(self) -> "NetworkData":
        return NetworkData.from_case(self)


@dataclass(frozen=True, eq=False)
class NetworkData:
    """Index maps and dense arrays derived once per case."""

    n: int
    ref: int  # 0-based position of the reference bus
    g: np.ndarray  # conductance
    b: np.ndarray  # susceptance
    dg_pos: np.ndarray  # bus positions of DGs in z order
    load_pos: np.ndarray  # non-DG bus positions, ascending
    nonref_pos: np.ndarray  # bus positions whose angle is an unknown
    dg_nonref: np.ndarray  # DG positions except the reference, in DG order
    res_pos: np.ndarray
    kp: np.ndarray
    kq: np.ndarray
    fp: np.ndarray
    fq: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    res_forecast: np.ndarray
    res_ratio: np.ndarray
    omega_set: float
    angle_rate: float

    @classmethod
    def from_case(cls, case: MicrogridCase) -> "NetworkData":
        n = case.n
        ref = case.ref_bus - 1
        y = build_admittance(case)
        dg_pos = np.array([d.bus - 1 for d in case.dgs], dtype=np.intp)
        is_dg = np.zeros(n, dtype=bool)
        is_dg[dg_pos] = True
        load_pos = np.flatnonzero(~is_dg).astype(np.intp)
        nonref = np.array([i for i in range(n) if i != ref], dtype=np.intp)
        dg_nonref = np.array([p for p in dg_pos if p != ref], dtype=np.intp)
        res_pos = np.array([r.bus - 1 for r in case.res_units], dtype=np.intp)
        return cls(
            n=n,
            ref=ref,
            g=y.g,
            b=y.b,
            dg_pos=dg_pos,
            load_pos=load_pos,
            nonref_pos=nonref,
            dg_nonref=dg_nonref,
            res_pos=res_pos,
            kp=np.array([d.kp for d in case.dgs]),
            kq=np.array([d.kq for d in case.dgs]),
            fp=np.array([d.fp for d in case.dgs]),
            fq=np.array([d.fq for d in case.dgs]),
            load_p=np.array([b.load_p for b in case.buses]),
            load_q=np.array([b.load_q for b in case.buses]),
            res_forecast=np.array([r.p_forecast for r in case.res_units]),
            res_ratio=np.array([r.q_ratio for r in case.res_units]),
            omega_set=case.omega_set,
            angle_rate=case.angle_rate,
        )

    def res_injection(self, eps_r) -> tuple[np.ndarray, np.ndarray]:
        """Bus-indexed RES active and reactive injections for realized error ``eps_r``."""
        p_res = self.res_forecast + np.asarray(eps_r, dtype=float)
        p = np.zeros(self.n)
        q = np.zeros(self.n)
        np.add.at(p, self.res_pos, p_res)
        np.add.at(q, self.res_pos, self.res_ratio * p_res)
        return p, q


def _err(msg: str) -> CaseValidationError:
    return CaseValidationError(msg)


def validate_case(case: MicrogridCase) -> None:
    n = len(case.buses)
    if n == 0:
        raise _err("case has no buses")
    ids = [b.id for b in case.buses]
    if ids != list(range(1, n + 1)):
        raise _err(f"bus ids must be contiguous 1..{n} in order, got {ids[:5]}...")
    for b in case.buses:
        if b.kind not in (DG, LOAD):
            raise _err(f"bus {b.id}: unknown kind {b.kind!r}")
        if not (math.isfinite(b.load_p) and math.isfinite(b.load_q)):
            raise _err(f"bus {b.id}: non-finite load")
        if not b.v_min < b.v_max:
            raise _err(f"bus {b.id}: v_min must be below v_max")
    for k, br in enumerate(case.branches, start=1):
        for end in (br.from_bus, br.to_bus):
            if not 1 <= end <= n:
                raise _err(f"branch {k} ({br.from_bus}-{br.to_bus}) references nonexistent bus {end}")
        if br.from_bus == br.to_bus:
            raise _err(f"branch {k}: from and to bus are both {br.from_bus}")
        if br.r < 0:
            raise _err(f"branch {k}: negative resistance")
        if br.r == 0 and br.x == 0:
            raise _err(f"branch {k}: zero impedance")
    if not case.dgs:
        raise _err("case needs at least one droop DG")
    seen = set()
    for d in case.dgs:
        if not 1 <= d.bus <= n:
            raise _err(f"DG references nonexistent bus {d.bus}")
        if d.bus in seen:
            raise _err(f"bus {d.bus} hosts more than one DG")
        seen.add(d.bus)
        if case.buses[d.bus - 1].kind != DG:
            raise _err(f"bus {d.bus} hosts a DG but its kind is {case.buses[d.bus - 1].kind}")
        if min(d.kp, d.kq, d.fp, d.fq) <= 0:
            raise _err(f"DG at bus {d.bus}: gains and filter corners must be positive")
        if not d.p_min < d.p_max or not d.q_min < d.q_max:
            raise _err(f"DG at bus {d.bus}: output limits are inverted")
        if len(d.cost) != 3 or d.cost[0] < 0:
            raise _err(f"DG at bus {d.bus}: cost needs (a2, a1, a0) with a2 >= 0")
    for b in case.buses:
        if b.kind == DG and b.id not in seen:
            raise _err(f"bus {b.id} is marked DG but no DG is attached")
    for r in case.res_units:
        if not 1 <= r.bus <= n:
            raise _err(f"RES unit references nonexistent bus {r.bus}")
        if r.p_forecast < 0 or not math.isfinite(r.q_ratio):
            raise _err(f"RES unit at bus {r.bus}: invalid forecast or ratio")
    if case.ref_bus not in seen:
        raise _err(f"reference bus {case.ref_bus} must host a DG")
    if not case.omega_base > 0:
        raise _err("omega_base must be positive")
    if case.frequency_unit not in (FREQ_PU, FREQ_RAD):
        raise _err(f"frequency_unit must be {FREQ_PU!r} or {FREQ_RAD!r}")
    if not case.s_base > 0:
        raise _err("s_base must be positive")
    _check_connected(n, case.branches)


def _check_connected(n: int, branches) -> None:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for br in branches:
        if br.status:
            ra, rb = find(br.from_bus - 1), find(br.to_bus - 1)
            if ra != rb:
                parent[ra] = rb
    roots = {find(i) for i in range(n)}
    if len(roots) > 1:
        island = sorted(i + 1 for i in range(n) if find(i) != find(0))
        raise _err(f"network is not connected; buses cut off from bus 1: {island[:10]}")


def build_admittance(case: MicrogridCase) -> AdmittanceMatrix:
    """Bus admittance from the pi branch model; out-of-service branches are skipped."""
    n = case.n
    br = [b for b in case.branches if b.status]
    if not br:
        return AdmittanceMatrix(np.zeros((n, n)), np.zeros((n, n)))
    f = np.array([b.from_bus - 1 for b in br])
    t = np.array([b.to_bus - 1 for b in br])
    z = np.array([complex(b.r, b.x) for b in br])
    ys = 1.0 / z
    ysh = 0.5j * np.array([b.b_sh for b in br])
    y = np.zeros((n, n), dtype=complex)
    np.add.at(y, (f, f), ys + ysh)
    np.add.at(y, (t, t), ys + ysh)
    np.add.at(y, (f, t), -ys)
    np.add.at(y, (t, f), -ys)
    return AdmittanceMatrix(np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag))


def scale_loads(case: MicrogridCase, factor: float) -> MicrogridCase:
    """Multiply every load and RES forecast by ``factor``."""
    if not (math.isfinite(factor) and factor > 0):
        raise ValueError(f"load scale factor must be finite and positive, got {factor}")
    buses = tuple(replace(b, load_p=b.load_p * factor, load_q=b.load_q * factor) for b in case.buses)
    res = tuple(replace(r, p_forecast=r.p_forecast * factor) for r in case.res_units)
    return replace(case, buses=buses, res_units=res)


# ---------------------------------------------------------------- native JSON


def case_to_dict(case: MicrogridCase) -> dict:
    return {
        "name": case.name,
        "s_base": case.s_base,
        "omega_base": case.omega_base,
        "omega_set": case.omega_set,
        "frequency_unit": case.frequency_unit,
        "ref_bus": case.ref_bus,
        "buses": [asdict(b) for b in case.buses],
        "branches": [
            {"from": b.from_bus, "to": b.to_bus, "r": b.r, "x": b.x, "b_sh": b.b_sh, "status": b.status}
            for b in case.branches
        ],
        "dgs": [{**asdict(d), "cost": list(d.cost)} for d in case.dgs],
        "res": [asdict(r) for r in case.res_units],
    }


def case_from_dict(data: dict) -> MicrogridCase:
    try:
        buses = tuple(
            Bus(
                id=int(b["id"]),
                kind=str(b.get("kind", LOAD)),
                load_p=float(b.get("load_p", 0.0)),
                load_q=float(b.get("load_q", 0.0)),
                v_min=float(b.get("v_min", 0.95)),
                v_max=float(b.get("v_max", 1.05)),
            )
            for b in data["buses"]
        )
        branches = tuple(
            Branch(
                from_bus=int(b["from"]),
                to_bus=int(b["to"]),
                r=float(b["r"]),
                x=float(b["x"]),
                b_sh=float(b.get("b_sh", 0.0)),
                status=bool(b.get("status", True)),
            )
            for b in data["branches"]
        )
        dgs = tuple(_dg_from_dict(d) for d in data["dgs"])
        res = tuple(
            ResUnit(bus=int(r["bus"]), p_forecast=float(r["p_forecast"]), q_ratio=float(r.get("q_ratio", 0.0)))
            for r in data.get("res", ())
        )
        kwargs = dict(
            s_base=float(data.get("s_base", 1.0)),
            omega_base=float(data.get("omega_base", 120.0 * math.pi)),
            frequency_unit=str(data.get("frequency_unit", FREQ_PU)),
            ref_bus=int(data.get("ref_bus", 1)),
            name=str(data.get("name", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CaseValidationError):
            raise
        raise CaseValidationError(f"malformed case data: {exc!r}") from exc
    default_set = 1.0 if kwargs["frequency_unit"] == FREQ_PU else kwargs["omega_base"]
    kwargs["omega_set"] = float(data.get("omega_set", default_set))
    return MicrogridCase(buses=buses, branches=branches, dgs=dgs, res_units=res, **kwargs)


def _dg_from_dict(d: dict) -> DroopDG:
    return DroopDG(
        bus=int(d["bus"]),
        kp=float(d["kp"]),
        kq=float(d["kq"]),
        fp=float(d["fp"]),
        fq=float(d.get("fq", d["fp"])),
        p_set=float(d.get("p_set", 0.0)),
        q_set=float(d.get("q_set", 0.0)),
        v_set=float(d.get("v_set", 1.0)),
        p_min=float(d.get("p_min", 0.0)),
        p_max=float(d.get("p_max", 1.0)),
        q_min=float(d.get("q_min", -1.0)),
        q_max=float(d.get("q_max", 1.0)),
        cost=tuple(float(c) for c in d.get("cost", (0.0, 1.0, 0.0))),
    )


def write_case(case: MicrogridCase, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1))


# ------------------------------------------------------------ MATPOWER subset

_TABLE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.S)
_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([-+0-9.eE]+)\s*;")


def parse_matpower(text: str) -> dict:
    """Read ``baseMVA``, ``bus`` and ``branch`` from MATPOWER case text."""
    text = re.sub(r"%[^\n]*", "", text)
    out: dict = {}
    for key, val in _SCALAR.findall(text):
        out[key] = float(val)
    for key, body in _TABLE.findall(text):
        rows = []
        for line in re.split(r"[;\n]", body):
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.replace(",", " ").split()])
        out[key] = rows
    for key in ("baseMVA", "bus", "branch"):
        if key not in out:
            raise CaseValidationError(f"MATPOWER file lacks mpc.{key}")
    return out


def case_from_matpower(text: str, sidecar: dict) -> MicrogridCase:
    """Map MATPOWER bus/branch data (MW, MVAr, p.u. impedances) onto a droop case.

    The sidecar supplies what MATPOWER has no fields for: ``dgs``, ``res``,
    and optionally the frequency convention and reference bus.
    """
    mpc = parse_matpower(text)
    base = mpc["baseMVA"]
    rows = sorted(mpc["bus"], key=lambda r: r[0])
    order = {int(r[0]): k + 1 for k, r in enumerate(rows)}
    dg_buses = {int(d["bus"]) for d in sidecar.get("dgs", ())}
    buses = []
    for r in rows:
        bid = order[int(r[0])]
        vmax = r[11] if len(r) > 11 else 1.05
        vmin = r[12] if len(r) > 12 else 0.95
        buses.append(
            Bus(
                id=bid,
                kind=DG if bid in dg_buses else LOAD,
                load_p=r[2] / base,
                load_q=r[3] / base,
                v_min=float(sidecar.get("v_min", vmin)),
                v_max=float(sidecar.get("v_max", vmax)),
            )
        )
    branches = []
    for k, r in enumerate(mpc["branch"], start=1):
        f, t = int(r[0]), int(r[1])
        for end in (f, t):
            if end not in order:
                raise CaseValidationError(f"branch {k} ({f}-{t}) references nonexistent bus {end}")
        status = bool(r[10]) if len(r) > 10 else True
        branches.append(Branch(order[f], order[t], r[2], r[3], r[4], status))
    data = {
        "name": sidecar.get("name", ""),
        "s_base": base,
        "buses": [asdict(b) for b in buses],
        "branches": [
            {"from": b.from_bus, "to": b.to_bus, "r": b.r, "x": b.x, "b_sh": b.b_sh, "status": b.status}
            for b in branches
        ],
        "dgs": sidecar["dgs"] if "dgs" in sidecar else [],
        "res": sidecar.get("res", []),
    }
    for key in ("omega_base", "omega_set", "frequency_unit", "ref_bus"):
        if key in sidecar:
            data[key] = sidecar[key]
    return case_from_dict(data)


def load_case(path, format: str | None = None, sidecar=None) -> MicrogridCase:
    """Load a case from native JSON or a MATPOWER ``.m`` file plus droop sidecar.

    ``format`` is ``"native-json"`` or ``"matpower-m"``; inferred from the
    suffix when omitted.  For MATPOWER input the sidecar defaults to
    ``<stem>.droop.json`` next to the case file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"case file not found: {path}")
    if format is None:
        format = "matpower-m" if path.suffix == ".m" else "native-json"
    if format == "native-json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CaseValidationError(f"{path}: invalid JSON ({exc})") from exc
        return case_from_dict(data)
    if format == "matpower-m":
        side = Path(sidecar) if sidecar is not None else path.with_suffix(".droop.json")
        if not side.exists():
            raise CaseValidationError(f"MATPOWER import needs a droop sidecar; not found: {side}")
        try:
            side_data = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise CaseValidationError(f"{side}: invalid JSON ({exc})") from exc
        return case_from_matpower(path.read_text(), side_data)
    raise ValueError(f"unknown case format {format!r}")
