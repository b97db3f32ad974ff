import dataclasses

import numpy as np
import pytest

from ccscopf.ccopf import (
    CUT_TOL,
    BendersCut,
    ConfidenceConfig,
    MasterInfeasible,
    SolveOptions,
    build_master,
    corrective_countermeasure,
    evaluate_anchor,
    expected_cost,
    security_quantiles,
    solve_ccscopf,
    solve_master,
    trust_radius,
)
from ccscopf.uncertainty import GmmModel


@pytest.fixture(scope="module")
def anchor33(case33, gmm33):
    return evaluate_anchor(case33, case33.z_default(), gmm33, ConfidenceConfig(), SolveOptions())


@pytest.fixture(scope="module")
def anchor5(case5, gmm5):
    return evaluate_anchor(case5, case5.z_default(), gmm5, ConfidenceConfig(), SolveOptions())


def _master(case, anchor, cuts=(), radius=None):
    return build_master(case, anchor.eq, anchor.bundle, anchor.quantiles, list(cuts), radius)


def test_confidence_config_validation():
    with pytest.raises(ValueError):
        ConfidenceConfig(eta_bar=0.1)
    with pytest.raises(ValueError):
        ConfidenceConfig(beta_eta=0.7)
    with pytest.raises(ValueError):
        SolveOptions(sensitivity_mode="bogus")


def test_median_quantiles_vanish_for_symmetric_errors(case5):
    gmm = GmmModel([0.5, 0.5], [[-0.01], [0.01]], [[[1e-5]], [[1e-5]]])
    conf = ConfidenceConfig(beta_g=0.5, beta_v=0.5)
    a = evaluate_anchor(case5, case5.z_default(), gmm, conf, SolveOptions())
    for key in ("pg_hi", "pg_lo", "qg_hi", "qg_lo", "v_hi", "v_lo"):
        assert np.max(np.abs(a.quantiles[key])) <= 1e-12
    m = _master(case5, a)
    pmax = np.array([d.p_max for d in case5.dgs])
    g = case5.g
    assert np.allclose(m.b_ub[:g], pmax - a.eq.p_g, atol=1e-12)


def test_quantiles_widen_with_confidence(case33, anchor33, gmm33):
    loose = security_quantiles(case33, anchor33.bundle, gmm33, ConfidenceConfig(beta_g=0.2, beta_v=0.2))
    tight = anchor33.quantiles
    assert np.all(tight["v_hi"] >= loose["v_hi"] - 1e-15)
    assert np.all(tight["v_lo"] <= loose["v_lo"] + 1e-15)


def test_inactive_cut_leaves_master_unchanged(case33, anchor33):
    base = _master(case33, anchor33)
    cut = BendersCut(anchor33.eta, np.zeros(3 * case33.g), anchor33.z, anchor33.eta + 1.0)
    with_cut = _master(case33, anchor33, [cut])
    _, dz0, _ = solve_master(base)
    _, dz1, _ = solve_master(with_cut)
    assert np.allclose(dz0, dz1, atol=1e-9)


def test_master_cost_does_not_exceed_anchor_cost(case33, anchor33):
    m = _master(case33, anchor33)
    assert m.objective(np.zeros(m.n)) == pytest.approx(anchor33.cost, rel=1e-12)
    _, dz, info = solve_master(m)
    assert info["objective"] <= anchor33.cost + 1e-12


def test_slack_master_reaches_unconstrained_minimum(case5, anchor5):
    m = _master(case5, anchor5, radius=10.0)
    m.b_ub = np.full_like(m.b_ub, 1e3)
    _, dz, _ = solve_master(m)
    ref = -np.linalg.solve(m.hess, m.lin)
    assert np.max(np.abs(ref)) < 10.0
    assert np.allclose(dz, ref, atol=1e-8 * max(1.0, np.max(np.abs(ref))))


def test_binding_voltage_row_holds_with_equality(case5, anchor5):
    m = _master(case5, anchor5, radius=10.0)
    m.b_ub = np.full_like(m.b_ub, 1e3)
    ref = -np.linalg.solve(m.hess, m.lin)
    row = m.labels.index("v_max[1]")
    a = m.a_ub[row]
    m.b_ub[row] = a @ ref - 0.2 * np.linalg.norm(a) * np.linalg.norm(ref)  # the unconstrained optimum violates it
    _, dz, _ = solve_master(m)
    assert a @ dz - m.b_ub[row] == pytest.approx(0.0, abs=1e-8)
    # stationarity: H dz + q = -lambda a with lambda >= 0
    grad = m.hess @ dz + m.lin
    lam = -(grad @ a) / (a @ a)
    assert lam > 0
    assert np.linalg.norm(grad + lam * a) <= 1e-6 * max(1.0, np.linalg.norm(grad))


def test_zero_trust_radius_gives_zero_step(case33, anchor33):
    m = _master(case33, anchor33, radius=0.0)
    z, dz, _ = solve_master(m)
    assert np.all(dz == 0.0) and np.array_equal(z, anchor33.z)


def test_infeasible_master_names_rows(case5, anchor5):
    cut = BendersCut(anchor5.eta, np.ones(3 * case5.g), anchor5.z, anchor5.eta - 10.0)
    m = _master(case5, anchor5, [cut], radius=1e-3)
    with pytest.raises(MasterInfeasible) as err:
        solve_master(m)
    assert "cut[0]" in err.value.active
    _, dz, info = solve_master(m, elastic=True)
    assert info["slack"] > 0 and "cut[0]" in info["active"]


def test_cuts_are_violated_at_generation(solved33):
    assert solved33.cuts, "the stability constraint should bind on the 33-bus case"
    conf = ConfidenceConfig()
    by_iter = {h["iteration"]: h for h in solved33.history if "stability_margin" in h}
    for cut in solved33.cuts:
        assert cut.violation(cut.anchor_z) > CUT_TOL
        assert cut.lhs(cut.anchor_z) == cut.eta_at_anchor
        rec = by_iter[cut.iteration]
        assert cut.violation(cut.anchor_z) == pytest.approx(-rec["stability_margin"], rel=1e-12, abs=1e-15)
        assert cut.rhs == pytest.approx(conf.eta_bar - rec["q_eta"], abs=1e-15)


def test_master_solutions_respect_earlier_cuts(solved33):
    for rec in solved33.history:
        if "z" not in rec or rec["elastic"]:
            continue
        z = np.array(rec["z"])
        for cut in solved33.cuts:
            if cut.iteration < rec["iteration"]:
                assert cut.violation(z) <= 1e-8


def test_master_cost_non_decreasing_in_cuts(case33, solved33, anchor33):
    radius = trust_radius(case33, 0.1, 0.01)
    prev = -np.inf
    for k in range(len(solved33.cuts) + 1):
        m = _master(case33, anchor33, solved33.cuts[:k], radius)
        try:
            _, _, info = solve_master(m)
        except MasterInfeasible:
            break
        assert info["objective"] >= prev - 1e-9 * max(1.0, abs(prev))
        prev = info["objective"]


def test_solution_satisfies_reformulated_constraints(case33, solved33):
    assert solved33.converged and solved33.status == "optimal"
    f = solved33.final
    assert f.stability_margin(ConfidenceConfig()) >= -1e-8
    for key, margin in f.margins.items():
        assert np.min(margin) >= -1e-8, key
    q = f.quantiles
    assert solved33.expected_cost == pytest.approx(expected_cost(case33, f.eq.p_g, q["pg_mean"], q["pg_var"]))


def test_stability_constraint_binds_at_optimum(solved33):
    # the cheapest units are the destabilizing ones, so the bound is active and cuts were needed
    assert solved33.final.stability_margin(ConfidenceConfig()) <= 1e-5
    assert solved33.expected_cost < solved33.history[0]["cost"]


def test_feasible_start_exits_after_one_master_solve(case5, gmm5, solved5):
    assert solved5.converged
    last = solved5.history[-1]
    warm = SolveOptions(trust_pq=last["trust_pq"], trust_v=last["trust_v"])
    again = solve_ccscopf(case5, gmm5, ConfidenceConfig(), warm, z0=solved5.z_opt)
    assert again.iterations == 1 and not again.cuts and again.converged


def test_unreachable_stability_target(case5, gmm5):
    rep = solve_ccscopf(case5, gmm5, ConfidenceConfig(eta_bar=-1e3), SolveOptions(max_iter=8))
    assert not rep.converged
    assert rep.status in ("infeasible", "iteration_cap")
    assert not rep.stability_ok
    assert rep.message


def test_zero_iterations_returns_anchor(case5, gmm5):
    rep = solve_ccscopf(case5, gmm5, ConfidenceConfig(), SolveOptions(max_iter=0))
    assert rep.iterations == 0 and rep.status == "iteration_cap"
    assert np.array_equal(rep.z_opt, case5.z_default())


def test_fixed_anchor_option_converges(case5, gmm5, solved5):
    rep = solve_ccscopf(case5, gmm5, ConfidenceConfig(), SolveOptions(reanchor=False))
    assert rep.converged and rep.feasible
    # the held linearization only approximates the true cost away from its anchor
    assert rep.expected_cost == pytest.approx(solved5.expected_cost, rel=1e-3)


def test_dimension_mismatch(case5, gmm33):
    with pytest.raises(ValueError):
        solve_ccscopf(case5, gmm33)


def test_countermeasure_is_identity_when_feasible(case5, gmm5, solved5):
    out = corrective_countermeasure(solved5, case5, gmm5, ConfidenceConfig(), n_samples=200)
    assert out.corrective_rounds == 0 and out.verified and not out.countermeasure_flag
    assert np.array_equal(out.z_opt, solved5.z_opt)


def test_countermeasure_repairs_inflated_deviation(case33, gmm33, overshoot33):
    conf, report, anchor = overshoot33
    assert report.cuts[0].violation(report.z_opt) <= 1e-12  # the linearized check passes
    out = corrective_countermeasure(report, case33, gmm33, conf, n_samples=200, seed=0, strict=True)
    trail = out.verification["rounds"]
    assert trail[0]["prob_eta"] < 1 - conf.beta_eta  # the true check fails before correction
    assert out.verified and 1 <= out.corrective_rounds <= 10
    assert out.verification["prob_eta"] >= 1 - conf.beta_eta
    dz = [r["dz_inf"] for r in trail]
    assert all(b <= a for a, b in zip(dz, dz[1:]))
    assert all(r["block"] == "Q*" for r in trail[1:])  # the only deviating block


def test_countermeasure_round_cap_flags(case33, gmm33, overshoot33):
    conf, report, _ = overshoot33
    out = corrective_countermeasure(report, case33, gmm33, conf, n_samples=50, seed=0, max_rounds=0)
    assert out.countermeasure_flag and not out.verified and out.corrective_rounds == 0
    assert "countermeasure" in out.message


def test_report_serializes(solved33):
    import json

    d = solved33.to_dict()
    text = json.dumps(d)
    assert json.loads(text)["iterations"] == solved33.iterations
    assert len(d["cuts"]) == len(solved33.cuts)
