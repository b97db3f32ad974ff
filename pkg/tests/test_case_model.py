import dataclasses
import json

import numpy as np
import pytest

from ccscopf.case_model import (
    Branch,
    Bus,
    CaseValidationError,
    DroopDG,
    MicrogridCase,
    build_admittance,
    case_from_dict,
    case_from_matpower,
    case_to_dict,
    load_case,
    parse_matpower,
    scale_loads,
    write_case,
)
from ccscopf.cases import DG_BUSES_33, WT_BUSES_33, bundled_case, modified_33bus
from ccscopf.power_flow import solve_equilibrium

from conftest import data_path


def test_json_round_trip(case5, tmp_path):
    p = tmp_path / "c.json"
    write_case(case5, p)
    back = load_case(p)
    assert case_to_dict(back) == case_to_dict(case5)


def test_bundled_json_matches_builder():
    assert case_to_dict(bundled_case()) == case_to_dict(modified_33bus())


def test_matpower_and_json_give_the_same_equilibrium():
    from importlib import resources

    with resources.as_file(data_path("ieee33_modified.m")) as p:
        m = load_case(p)
    j = bundled_case()
    assert np.allclose(solve_equilibrium(m).state, solve_equilibrium(j).state, atol=1e-12)


def test_33bus_layout(case33):
    assert case33.n == 33 and case33.g == 7 and case33.n_res == 5
    assert tuple(d.bus for d in case33.dgs) == DG_BUSES_33
    assert tuple(r.bus for r in case33.res_units) == WT_BUSES_33
    assert all(d.kp == 1.3 and d.kq == 7.8 and d.fp == 20.0 for d in case33.dgs)


def test_load_scaling_scales_res_forecasts():
    full = modified_33bus(load_scale=1.0)
    part = modified_33bus(load_scale=0.2)
    assert part.buses[5].load_p == pytest.approx(0.2 * full.buses[5].load_p)
    assert part.res_units[0].p_forecast == pytest.approx(0.2 * full.res_units[0].p_forecast)
    with pytest.raises(ValueError):
        scale_loads(full, 0.0)


def test_admittance_rows_sum_to_shunts(case5):
    y = build_admittance(case5)
    shunt = np.zeros(case5.n)
    for b in case5.branches:
        shunt[b.from_bus - 1] += b.b_sh / 2
        shunt[b.to_bus - 1] += b.b_sh / 2
    assert np.allclose(y.g.sum(axis=1), 0, atol=1e-12)
    assert np.allclose(y.b.sum(axis=1), shunt, atol=1e-12)


def _edit(case, **kw):
    return dataclasses.replace(case, **kw)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda c: _edit(c, branches=c.branches + (Branch(1, 9, 0.1, 0.1),)), "nonexistent bus 9"),
        (lambda c: _edit(c, branches=c.branches + (Branch(2, 2, 0.1, 0.1),)), "both 2"),
        (lambda c: _edit(c, branches=(Branch(1, 2, 0.0, 0.0),) + c.branches[1:]), "zero impedance"),
        (lambda c: _edit(c, ref_bus=2), "reference bus"),
        (lambda c: _edit(c, frequency_unit="hz"), "frequency_unit"),
        (lambda c: _edit(c, dgs=(dataclasses.replace(c.dgs[0], kp=-1.0),) + c.dgs[1:]), "positive"),
        (lambda c: _edit(c, branches=c.branches[:3]), "connected"),
    ],
)
def test_validation_errors(case5, mutate, message):
    with pytest.raises(CaseValidationError, match=message):
        mutate(case5)


def test_islanded_subnetwork_rejected():
    buses = (Bus(1, "DG"), Bus(2, "LOAD", 0.1), Bus(3, "LOAD", 0.1))
    with pytest.raises(CaseValidationError):
        MicrogridCase(buses=buses, branches=(Branch(1, 2, 0.01, 0.1),),
                      dgs=(DroopDG(1, 0.05, 0.05, 10.0, 10.0),))


def test_malformed_dict():
    with pytest.raises(CaseValidationError):
        case_from_dict({"buses": [{"id": 1}]})


def test_invalid_json_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CaseValidationError):
        load_case(p)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_case(tmp_path / "none.json")


MPC = """function mpc = small
mpc.baseMVA = 10;
mpc.bus = [
 1 3 0 0 0 0 1 1 0 12.66 1 1.05 0.95;
 2 1 1.0 0.5 0 0 1 1 0 12.66 1 1.05 0.95;
];
mpc.branch = [
 1 2 0.01 0.05 0 0 0 0 0 0 1 -360 360;
];
"""


def test_matpower_subset_parsing():
    mpc = parse_matpower(MPC)
    assert mpc["baseMVA"] == 10 and len(mpc["bus"]) == 2 and len(mpc["branch"]) == 1
    side = {"dgs": [{"bus": 1, "kp": 0.05, "kq": 0.05, "fp": 10.0}]}
    case = case_from_matpower(MPC, side)
    assert case.buses[1].load_p == pytest.approx(0.1)
    assert case.branches[0].x == pytest.approx(0.05)


def test_matpower_missing_table_and_sidecar(tmp_path):
    with pytest.raises(CaseValidationError, match="branch"):
        parse_matpower("mpc.baseMVA = 1;\nmpc.bus = [1 3 0 0];")
    p = tmp_path / "x.m"
    p.write_text(MPC)
    with pytest.raises(CaseValidationError, match="sidecar"):
        load_case(p)
    (tmp_path / "x.droop.json").write_text(json.dumps({"dgs": [{"bus": 1, "kp": 0.1, "kq": 0.1, "fp": 5.0}]}))
    assert load_case(p).g == 1
