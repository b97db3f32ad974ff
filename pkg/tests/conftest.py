import numpy as np
import pytest

from ccscopf.cases import bundled_case, five_bus, modified_33bus, two_bus
from ccscopf.ccopf import ConfidenceConfig, SolveOptions, solve_ccscopf
from ccscopf.uncertainty import fit_gmm, load_gmm, read_errors_csv
from importlib import resources


def data_path(name):
    return resources.files("ccscopf") / "data" / name


@pytest.fixture(scope="session")
def case33():
    return modified_33bus()


@pytest.fixture(scope="session")
def gmm33():
    with resources.as_file(data_path("ieee33_gmm.json")) as p:
        return load_gmm(p)


@pytest.fixture(scope="session")
def errors33():
    with resources.as_file(data_path("ieee33_wt_errors.csv")) as p:
        return read_errors_csv(p)[1]


@pytest.fixture(scope="session")
def gmm33_small(errors33):
    # three components keep the fit cheap where the mixture shape does not matter
    return fit_gmm(errors33[:2000], m=3, seed=0)


@pytest.fixture(scope="session")
def solved33(case33, gmm33):
    return solve_ccscopf(case33, gmm33, ConfidenceConfig(), SolveOptions())


@pytest.fixture(scope="session")
def case2():
    return two_bus()


@pytest.fixture(scope="session")
def case5():
    return five_bus()


@pytest.fixture(scope="session")
def case5_lossless():
    return five_bus(lossless=True)


@pytest.fixture(scope="session")
def gmm5():
    rng = np.random.default_rng(3)
    lo = rng.normal(-0.004, 0.001, (1400, 1))
    hi = rng.normal(0.003, 0.0015, (2600, 1))
    return fit_gmm(np.vstack([lo, hi]), m=2, seed=0)


@pytest.fixture(scope="session")
def all_cases(case2, case5, case5_lossless, case33):
    return {"two-bus": case2, "five-bus": case5, "five-bus-lossless": case5_lossless, "33-bus": case33}


@pytest.fixture(scope="session")
def solved5(case5, gmm5):
    return solve_ccscopf(case5, gmm5, ConfidenceConfig(), SolveOptions())


@pytest.fixture(scope="session")
def overshoot33(case33, gmm33):
    """Set-points whose linearized stability CC holds while the true one fails.

    Starting at the default dispatch with the stability bound placed 0.004
    above the anchor's eta, a step along the reactive set-points is sized so
    the linear prediction lands exactly on the bound; curvature pushes the
    true eta past it.  The step is stored as a quarter-size deviation
    inflated four-fold.
    """
    from ccscopf.ccopf import BendersCut, SolveReport, evaluate_anchor

    opts = SolveOptions()
    a0 = evaluate_anchor(case33, case33.z_default(), gmm33, ConfidenceConfig(), opts)
    conf = ConfidenceConfig(eta_bar=round(a0.eta + a0.q_eta + 0.004, 4))
    a = evaluate_anchor(case33, case33.z_default(), gmm33, conf, opts)
    g = case33.g
    grad = a.bundle.deta_dz
    u = np.zeros_like(grad)
    u[g : 2 * g] = grad[g : 2 * g]
    base = 0.25 * a.stability_margin(conf) / (grad @ u) * u
    z_bad = a.z + 4.0 * base
    cut = BendersCut(a.eta, grad, a.z, conf.eta_bar - a.q_eta)
    report = SolveReport(z_opt=z_bad, expected_cost=a.cost, eta_final=a.eta, iterations=1, cuts=[cut],
                         corrective_rounds=0, history=[], converged=True, anchor_z=a.z.copy(),
                         z_start=a.z.copy())
    return conf, report, a
