"""Chance-constrained, stability-constrained dispatch of droop set-points.

Successive linearization around an equilibrium anchor.  Each iteration solves a
convex QP in dz = z - z_anchor with the security chance constraints rewritten
through quantiles of the projected forecast-error mixture, then checks the
stability chance constraint at the new point and, when it fails, adds the
linear cut

    eta_k + g_k'(z - z_k) <= eta_bar - F^-1_{U_R}(1 - beta_eta).
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .case_model import MicrogridCase
from .power_flow import Equilibrium, NonConvergence, SingularNewtonJacobian, solve_equilibrium
from .sdp import SolverFailure
from .sensitivity import (
    IllConditionedEquilibrium,
    SensitivityBundle,
    build_s_matrix,
    chain_rule_sensitivities,
    state_sensitivities,
    _outputs,
)
from .small_signal import SingularAlgebraicBlock, assemble, reduce
from .stability import NotOptimal, StabilityOptions, StabilityResult, stability_index
from .uncertainty import GmmModel, batch_inverse_cdf, project_rows, sample

log = logging.getLogger(__name__)

MODES = ("analytic", "eta-perturbation", "probability-perturbation")
CUT_TOL = 1e-8
PF_TOL = 1e-11  # cost and margins are compared across iterates at this resolution
RATIO_ACCEPT = 0.1
RATIO_EXPAND = 0.75
MIN_RADIUS_RATIO = 1e-9


class MasterInfeasible(RuntimeError):
    def __init__(self, msg: str, active: list[str]):
        super().__init__(msg)
        self.active = active


class MasterFailure(RuntimeError):
    pass


class EvaluationFailure(RuntimeError):
    """The pipeline (equilibrium, reduction, SDP) failed at a candidate point."""


@dataclass(frozen=True)
class ConfidenceConfig:
    eta_bar: float = -0.15
    beta_eta: float = 0.05
    beta_g: float = 0.01
    beta_v: float = 0.01

    def __post_init__(self):
        if not self.eta_bar < 0:
            raise ValueError(f"eta_bar must be negative, got {self.eta_bar}")
        for name in ("beta_eta", "beta_g", "beta_v"):
            b = getattr(self, name)
            if not 0.0 < b <= 0.5:
                raise ValueError(f"{name} must lie in (0, 0.5], got {b}")


@dataclass(frozen=True)
class SolveOptions:
    trust_pq: float = 0.1  # box radius on P*, Q* deviations (pu)
    trust_v: float = 0.01  # box radius on V* deviations (pu)
    max_iter: int = 200
    cost_tol: float = 1e-6  # relative to max(1, |cost|)
    prox: float = 1e-3  # weight of |dz|^2, keeps the QP strictly convex in Q*, V*
    merit_penalty: float = 1e5  # cost units per unit of constraint violation in the step test
    reanchor: bool = True
    sensitivity_mode: str = "analytic"
    stability: StabilityOptions = StabilityOptions()
    fd_step: float = 1e-4  # eta-perturbation step on z and eps
    prob_step: float = 1e-4  # probability-perturbation step on z
    prob_samples: int = 200  # MC samples per probability round
    mc_budget: int | None = None  # total probability-mode samples before giving up
    verify_samples: int = 0  # MC check after convergence; 0 skips verification
    verify_strict: bool = False  # compare point estimates; otherwise allow the binomial half-width
    countermeasure_rounds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.sensitivity_mode not in MODES:
            raise ValueError(f"sensitivity_mode must be one of {MODES}")
        if self.trust_pq < 0 or self.trust_v < 0:
            raise ValueError("trust radii must be non-negative")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass
class BendersCut:
    """value + gradient'(z - anchor_z) <= rhs.

    For stability cuts ``eta_at_anchor`` is eta at the anchor.  Probability cuts
    store the negated empirical probability and gradient.
    """

    eta_at_anchor: float
    gradient: np.ndarray
    anchor_z: np.ndarray
    rhs: float
    iteration: int = 0
    kind: str = "eta"

    def __post_init__(self):
        self.gradient = np.asarray(self.gradient, dtype=float)
        self.anchor_z = np.asarray(self.anchor_z, dtype=float)
        if not np.all(np.isfinite(self.gradient)):
            raise ValueError("cut gradient must be finite")

    def lhs(self, z) -> float:
        return float(self.eta_at_anchor + self.gradient @ (np.asarray(z, dtype=float) - self.anchor_z))

    def violation(self, z) -> float:
        return self.lhs(z) - self.rhs

    def to_dict(self) -> dict:
        return {
            "eta_at_anchor": self.eta_at_anchor,
            "gradient": self.gradient.tolist(),
            "anchor_z": self.anchor_z.tolist(),
            "rhs": self.rhs,
            "iteration": self.iteration,
            "kind": self.kind,
        }


@dataclass
class Anchor:
    """Everything evaluated at one set-point vector with zero forecast error."""

    z: np.ndarray
    eq: Equilibrium
    stab: StabilityResult
    bundle: SensitivityBundle
    quantiles: dict
    q_eta: float
    cost: float
    margins: dict
    prob_eta: float | None = None
    prob_grad: np.ndarray | None = None

    @property
    def eta(self) -> float:
        return self.stab.eta

    def stability_margin(self, conf: ConfidenceConfig) -> float:
        if self.prob_eta is not None:
            return self.prob_eta - (1.0 - conf.beta_eta)
        return conf.eta_bar - self.eta - self.q_eta

    def security_margin(self) -> float:
        return min(float(np.min(m)) for m in self.margins.values())


@dataclass
class MasterProblem:
    hess: np.ndarray  # objective 0.5 dz'H dz + q'dz + c0
    lin: np.ndarray
    const: float
    a_ub: np.ndarray  # a_ub dz <= b_ub
    b_ub: np.ndarray
    labels: list
    radius: np.ndarray  # |dz_i - center_i| <= radius_i
    anchor_z: np.ndarray
    center: np.ndarray | None = None  # trust-box centre in dz; zero unless the linearization is held fixed

    @property
    def n(self) -> int:
        return self.lin.size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.zeros(self.n) if self.center is None else np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius

    def objective(self, dz) -> float:
        dz = np.asarray(dz, dtype=float)
        return float(0.5 * dz @ self.hess @ dz + self.lin @ dz + self.const)


@dataclass
class SolveReport:
    z_opt: np.ndarray
    expected_cost: float
    eta_final: float
    iterations: int
    cuts: list
    corrective_rounds: int
    history: list
    status: str = "optimal"  # optimal | iteration_cap | infeasible | budget_exhausted
    converged: bool = False
    message: str = ""
    anchor_z: np.ndarray | None = None  # anchor of the last master solve
    z_start: np.ndarray | None = None
    q_eta: float = 0.0
    stability_ok: bool = False
    security_ok: bool = False
    verified: bool | None = None
    verification: dict | None = None
    countermeasure_flag: bool = False
    infeasible_ids: list = field(default_factory=list)
    mode: str = "analytic"
    timing: dict = field(default_factory=dict)
    final: Anchor | None = field(default=None, repr=False)

    @property
    def feasible(self) -> bool:
        return self.stability_ok and self.security_ok

    def to_dict(self) -> dict:
        out = {
            "z_opt": np.asarray(self.z_opt).tolist(),
            "expected_cost": self.expected_cost,
            "eta_final": self.eta_final,
            "q_eta": self.q_eta,
            "iterations": self.iterations,
            "corrective_rounds": self.corrective_rounds,
            "status": self.status,
            "converged": self.converged,
            "feasible": self.feasible,
            "stability_ok": self.stability_ok,
            "security_ok": self.security_ok,
            "verified": self.verified,
            "verification": self.verification,
            "countermeasure_flag": self.countermeasure_flag,
            "message": self.message,
            "mode": self.mode,
            "anchor_z": None if self.anchor_z is None else np.asarray(self.anchor_z).tolist(),
            "z_start": None if self.z_start is None else np.asarray(self.z_start).tolist(),
            "infeasible_ids": list(self.infeasible_ids),
            "cuts": [c.to_dict() for c in self.cuts],
            "history": self.history,
            "timing": self.timing,
        }
        return out


# ---------------------------------------------------------------- evaluation


def evaluate_stability(case: MicrogridCase, z, eps_r=None, opts: StabilityOptions | None = None, init=None):
    """Equilibrium, reduced Jacobian and SDP result at (z, eps)."""
    try:
        eq = solve_equilibrium(case, z, eps_r, init=init, tol=PF_TOL)
        j = reduce(assemble(case, eq, tol=PF_TOL)).j
        stab = stability_index(j, opts)
    except (NonConvergence, SingularNewtonJacobian, SingularAlgebraicBlock, SolverFailure,
            np.linalg.LinAlgError) as exc:
        raise EvaluationFailure(f"{type(exc).__name__}: {exc}") from exc
    return eq, j, stab


def _security_rows(case: MicrogridCase, bundle: SensitivityBundle) -> np.ndarray:
    return np.vstack([bundle.dpg_deps, bundle.dqg_deps, bundle.dv_deps])


def security_quantiles(case: MicrogridCase, bundle: SensitivityBundle, gmm: GmmModel,
                       conf: ConfidenceConfig) -> dict:
    """Upper F^-1(1-beta) and lower F^-1(beta) constants of every output's error term, plus mean/variance."""
    g, n = case.g, case.n
    rows = _security_rows(case, bundle)
    mu, var = project_rows(gmm, rows)
    beta = np.concatenate([np.full(2 * g, conf.beta_g), np.full(n, conf.beta_v)])
    k = rows.shape[0]
    q = batch_inverse_cdf(gmm.weights, np.vstack([mu, mu]), np.vstack([var, var]),
                          np.concatenate([1.0 - beta, beta]))
    hi, lo = q[:k], q[k:]
    mean = mu @ gmm.weights
    second = (var + mu**2) @ gmm.weights
    sl = {"pg": slice(0, g), "qg": slice(g, 2 * g), "v": slice(2 * g, 2 * g + n)}
    out = {}
    for key, s in sl.items():
        out[key + "_hi"] = hi[s]
        out[key + "_lo"] = lo[s]
    out["pg_mean"] = mean[sl["pg"]]
    out["pg_var"] = second[sl["pg"]] - mean[sl["pg"]] ** 2
    return out


def stability_quantile(bundle: SensitivityBundle, gmm: GmmModel, conf: ConfidenceConfig) -> float:
    mu, var = project_rows(gmm, bundle.deta_deps[None, :])
    return float(batch_inverse_cdf(gmm.weights, mu, var, [1.0 - conf.beta_eta])[0])


def _limits(case: MicrogridCase):
    pmin = np.array([d.p_min for d in case.dgs])
    pmax = np.array([d.p_max for d in case.dgs])
    qmin = np.array([d.q_min for d in case.dgs])
    qmax = np.array([d.q_max for d in case.dgs])
    vmin = np.array([b.v_min for b in case.buses])
    vmax = np.array([b.v_max for b in case.buses])
    return pmin, pmax, qmin, qmax, vmin, vmax


def security_margins(case: MicrogridCase, eq: Equilibrium, quant: dict) -> dict:
    """Slack of the reformulated security constraints at dz = 0 (>= 0 means satisfied)."""
    pmin, pmax, qmin, qmax, vmin, vmax = _limits(case)
    return {
        "pg_max": pmax - eq.p_g - quant["pg_hi"],
        "pg_min": eq.p_g + quant["pg_lo"] - pmin,
        "qg_max": qmax - eq.q_g - quant["qg_hi"],
        "qg_min": eq.q_g + quant["qg_lo"] - qmin,
        "v_max": vmax - eq.v - quant["v_hi"],
        "v_min": eq.v + quant["v_lo"] - vmin,
    }


def expected_cost(case: MicrogridCase, p_g, pg_mean, pg_var) -> float:
    """E[a2 P^2 + a1 P + a0] with P = p_g + U, U of given mean and variance."""
    c = np.array([d.cost for d in case.dgs])
    p = np.asarray(p_g) + pg_mean
    return float(np.sum(c[:, 0] * (p**2 + pg_var) + c[:, 1] * p + c[:, 2]))


def _eta_fd_bundle(case: MicrogridCase, eq: Equilibrium, stab: StabilityResult, opts: SolveOptions):
    """Sensitivity bundle whose eta rows come from re-solving the whole pipeline at perturbed points."""
    h = opts.fd_step
    s = build_s_matrix(case, eq)
    ss = state_sensitivities(case, s)
    lam = case.network.res_ratio
    du_de = ss.du_dpr + ss.du_dqr * lam[None, :]
    dv_dz, dv_de, dw_dz, dw_de, dpg_dz, dqg_dz, dpg_de, dqg_de = _outputs(case, ss.du_dz, du_de)

    def eta_at(zz, ee):
        return evaluate_stability(case, zz, ee, opts.stability, init=eq)[2].eta

    z0 = eq.z
    e0 = np.zeros(case.n_res)
    gz = np.empty(z0.size)
    for i in range(z0.size):
        dz = np.zeros_like(z0)
        dz[i] = h
        gz[i] = (eta_at(z0 + dz, e0) - eta_at(z0 - dz, e0)) / (2 * h)
    ge = np.empty(case.n_res)
    for i in range(case.n_res):
        de = np.zeros(case.n_res)
        de[i] = h
        ge[i] = (eta_at(z0, de) - eta_at(z0, -de)) / (2 * h)
    nan = np.full(case.n_res, np.nan)
    return SensitivityBundle(
        eta0=stab.eta, deta_dz=gz, deta_dpr=nan, deta_dqr=nan, deta_deps=ge,
        dv_dz=dv_dz, dpg_dz=dpg_dz, dqg_dz=dqg_dz, dv_deps=dv_de, dpg_deps=dpg_de, dqg_deps=dqg_de,
        domega_dz=dw_dz, domega_deps=dw_de, anchor=eq, fingerprint=eq.fingerprint,
    )


class _ProbabilityOracle:
    """Empirical Pr(eta <= eta_bar) on a fixed sample set (common random numbers)."""

    def __init__(self, case, gmm, conf, opts: SolveOptions):
        self.case, self.conf, self.opts = case, conf, opts
        self.eps = sample(gmm, opts.prob_samples, np.random.default_rng(opts.seed))
        self.used = 0

    def probability(self, z, init: Equilibrium) -> float:
        budget = self.opts.mc_budget
        if budget is not None and self.used + len(self.eps) > budget:
            raise _BudgetExhausted(f"probability-perturbation budget of {budget} samples exhausted")
        hits = 0
        for e in self.eps:
            try:
                _, _, st = evaluate_stability(self.case, z, e, self.opts.stability, init=init)
                hits += st.eta <= self.conf.eta_bar
            except EvaluationFailure:
                pass
        self.used += len(self.eps)
        return hits / len(self.eps)

    def gradient(self, z, p0: float, init: Equilibrium) -> np.ndarray:
        h = self.opts.prob_step
        out = np.empty(z.size)
        for i in range(z.size):
            zz = z.copy()
            zz[i] += h
            out[i] = (self.probability(zz, init) - p0) / h
        return out


class _BudgetExhausted(RuntimeError):
    pass


def evaluate_anchor(case: MicrogridCase, z, gmm: GmmModel, conf: ConfidenceConfig, opts: SolveOptions,
                    init: Equilibrium | None = None, oracle: _ProbabilityOracle | None = None) -> Anchor:
    z = np.asarray(z, dtype=float)
    eq, j, stab = evaluate_stability(case, z, None, opts.stability, init=init)
    try:
        if opts.sensitivity_mode == "eta-perturbation":
            bundle = _eta_fd_bundle(case, eq, stab, opts)
        else:
            bundle = chain_rule_sensitivities(case, eq, stab, build_s_matrix(case, eq))
    except (IllConditionedEquilibrium, NotOptimal) as exc:
        raise EvaluationFailure(f"{type(exc).__name__}: {exc}") from exc
    quant = security_quantiles(case, bundle, gmm, conf)
    q_eta = stability_quantile(bundle, gmm, conf)
    cost = expected_cost(case, eq.p_g, quant["pg_mean"], quant["pg_var"])
    anchor = Anchor(z, eq, stab, bundle, quant, q_eta, cost, security_margins(case, eq, quant))
    if oracle is not None:
        anchor.prob_eta = oracle.probability(z, eq)
        if anchor.prob_eta < 1.0 - conf.beta_eta:
            anchor.prob_grad = oracle.gradient(z, anchor.prob_eta, eq)
    return anchor


# ---------------------------------------------------------------- master QP


def trust_radius(case: MicrogridCase, trust_pq: float, trust_v: float) -> np.ndarray:
    g = case.g
    return np.concatenate([np.full(2 * g, trust_pq), np.full(g, trust_v)])


def build_master(case: MicrogridCase, eq: Equilibrium, bundle: SensitivityBundle, quantiles: dict,
                 cuts: list, radius=None, prox: float = 1e-3) -> MasterProblem:
    """Convex QP in dz around the anchor ``eq``."""
    if bundle.fingerprint and bundle.fingerprint != eq.fingerprint:
        raise ValueError("sensitivity bundle is anchored at a different equilibrium")
    g, n = case.g, case.n
    m = 3 * g
    z0 = np.asarray(eq.z, dtype=float)
    radius = trust_radius(case, 0.1, 0.01) if radius is None else np.broadcast_to(np.asarray(radius, float), (m,))

    c = np.array([d.cost for d in case.dgs])
    a = bundle.dpg_dz
    p_bar = eq.p_g + quantiles["pg_mean"]
    hess = 2.0 * a.T @ (c[:, 0, None] * a) + 2.0 * prox * np.eye(m)
    lin = a.T @ (2.0 * c[:, 0] * p_bar + c[:, 1])
    const = float(np.sum(c[:, 0] * (p_bar**2 + quantiles["pg_var"]) + c[:, 1] * p_bar + c[:, 2]))

    pmin, pmax, qmin, qmax, vmin, vmax = _limits(case)
    blocks = [
        ("pg_max", bundle.dpg_dz, pmax - eq.p_g - quantiles["pg_hi"]),
        ("pg_min", -bundle.dpg_dz, eq.p_g + quantiles["pg_lo"] - pmin),
        ("qg_max", bundle.dqg_dz, qmax - eq.q_g - quantiles["qg_hi"]),
        ("qg_min", -bundle.dqg_dz, eq.q_g + quantiles["qg_lo"] - qmin),
        ("v_max", bundle.dv_dz, vmax - eq.v - quantiles["v_hi"]),
        ("v_min", -bundle.dv_dz, eq.v + quantiles["v_lo"] - vmin),
    ]
    rows, rhs, labels = [], [], []
    for name, mat, b in blocks:
        rows.append(mat)
        rhs.append(b)
        labels += [f"{name}[{i}]" for i in range(mat.shape[0])]
    for k, cut in enumerate(cuts):
        rows.append(cut.gradient[None, :])
        rhs.append([cut.rhs - cut.lhs(z0)])
        labels.append(f"cut[{k}]")
    return MasterProblem(hess, lin, const, np.vstack(rows), np.concatenate(rhs).astype(float), labels,
                         np.array(radius, dtype=float), z0)


QP_TOLS = (1e-12, 1e-10, 1e-8)  # retried in order when the solver reports numerical trouble


def _clarabel_qp(hess, lin, a_ub, b_ub):
    import clarabel

    p = sp.triu(sp.csc_matrix(hess)).tocsc()
    a = sp.csc_matrix(a_ub)
    sol = None
    for tol in QP_TOLS:
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.tol_feas = tol
        settings.max_iter = 400
        solver = clarabel.DefaultSolver(p, np.asarray(lin, float), a, np.asarray(b_ub, float),
                                        [clarabel.NonnegativeConeT(a.shape[0])], settings)
        sol = solver.solve()
        if str(sol.status) not in ("NumericalError", "InsufficientProgress", "MaxIterations"):
            break
    return sol


def _polish(h, q, a, b, x, active_tol: float = 1e-6):
    """Re-solve the KKT system on the rows the interior-point answer leaves nearly active.

    Keeps the refined point only when it stays feasible, has non-negative
    multipliers and does not raise the objective.
    """
    act = np.flatnonzero(a @ x - b >= -active_tol)
    n = x.size
    if act.size == 0 or act.size > n:
        return x
    aa = a[act]
    kkt = np.block([[h, aa.T], [aa, np.zeros((act.size, act.size))]])
    try:
        sol = np.linalg.solve(kkt, np.concatenate([-q, b[act]]))
    except np.linalg.LinAlgError:
        return x
    xp, lam = sol[:n], sol[n:]
    if np.any(lam < -1e-9) or np.max(a @ xp - b) > 1e-12:
        return x
    obj = lambda v: 0.5 * v @ h @ v + q @ v
    return xp if obj(xp) <= obj(x) + 1e-14 * max(1.0, abs(obj(x))) else x


def solve_master(master: MasterProblem, elastic: bool = False, penalty: float | None = None):
    """Optimal dz of the master QP; returns (z_new, dz, info).

    With ``elastic`` every non-trust row gets a non-negative slack priced at
    ``penalty`` per unit of row-normalized violation.
    """
    m = master.n
    lo_all, hi_all = master.bounds()
    free = hi_all > lo_all
    dz = np.where(free, 0.0, lo_all)  # variables with no room sit at the box centre
    nf = int(np.count_nonzero(free))
    info = {"elastic": elastic, "slack": 0.0, "active": []}
    b = master.b_ub - master.a_ub[:, ~free] @ dz[~free]
    if nf == 0:
        viol = b < -CUT_TOL
        if np.any(viol) and not elastic:
            raise MasterInfeasible("constraints violated with zero trust radius",
                                   [lab for lab, v in zip(master.labels, viol) if v])
        info["objective"] = master.objective(dz)
        return master.anchor_z + dz, dz, info
    # work in x = dz / s so every variable lives in [-1, 1], and bring the objective to unit scale
    lo, hi = lo_all[free], hi_all[free]
    r = np.maximum(np.abs(lo), np.abs(hi))
    h = master.hess[np.ix_(free, free)] * np.outer(r, r)
    q = (master.lin[free] + master.hess[np.ix_(free, ~free)] @ dz[~free]) * r
    sigma = max(float(np.max(np.abs(h))), float(np.max(np.abs(q))), 1e-300)
    h, q = h / sigma, q / sigma
    a = master.a_ub[:, free] * r
    scale = np.max(np.abs(a), axis=1)
    keep = scale > 0
    trivially_bad = (~keep) & (b < -CUT_TOL)
    an = a[keep] / scale[keep, None]
    bn = b[keep] / scale[keep]
    kept = [lab for lab, k in zip(master.labels, keep) if k]
    nr = an.shape[0]
    eye = np.eye(nf)
    xlo, xhi = lo / r, hi / r
    if elastic:
        if penalty is None:
            penalty = 1e3 * max(1.0, float(np.max(np.abs(q))), float(np.max(np.abs(h))))
        else:
            penalty = penalty / sigma
        hh = np.zeros((nf + nr, nf + nr))
        hh[:nf, :nf] = h
        qq = np.concatenate([q, np.full(nr, penalty)])
        aa = np.block([[an, -np.eye(nr)], [eye, np.zeros((nf, nr))], [-eye, np.zeros((nf, nr))],
                       [np.zeros((nr, nf)), -np.eye(nr)]])
        bb = np.concatenate([bn, xhi, -xlo, np.zeros(nr)])
    else:
        if np.any(trivially_bad):
            bad = [lab for lab, t in zip(master.labels, trivially_bad) if t]
            raise MasterInfeasible("constraints violated independently of dz", bad)
        hh, qq = h, q
        aa = np.vstack([an, eye, -eye])
        bb = np.concatenate([bn, xhi, -xlo])
    sol = _clarabel_qp(hh, qq, aa, bb)
    status = str(sol.status)
    if "Infeasible" in status:
        zdual = np.abs(np.asarray(sol.z)[:nr])
        thr = 1e-8 * max(float(np.max(zdual)), 1e-300)
        active = [lab for lab, zv in zip(kept, zdual) if zv > thr]
        raise MasterInfeasible(f"master QP infeasible ({status})", active)
    if status not in ("Solved", "AlmostSolved"):
        raise MasterFailure(f"master QP solver returned {status}")
    x = np.asarray(sol.x)
    if not elastic:
        x = _polish(h, q, aa, bb, x)
    dz[free] = np.clip(x[:nf], xlo, xhi) * r
    if elastic:
        slack = np.maximum(x[nf:], 0.0)
        info["slack"] = float(np.max(slack)) if slack.size else 0.0
        info["active"] = [lab for lab, s in zip(kept, slack) if s > 1e-9]
    info["objective"] = master.objective(dz)
    info["status"] = status
    return master.anchor_z + dz, dz, info


# ---------------------------------------------------------------- driver


def _record(k, anchor: Anchor, conf, cut_added, radius, master_info, seconds, predicted) -> dict:
    margins = {key: float(np.min(v)) for key, v in anchor.margins.items()}
    return {
        "iteration": k,
        "cost": anchor.cost,
        "predicted_cost": predicted,
        "eta": anchor.eta,
        "q_eta": anchor.q_eta,
        "prob_eta": anchor.prob_eta,
        "stability_margin": anchor.stability_margin(conf),
        "security_margins": margins,
        "cut_added": cut_added,
        "trust_pq": float(radius[0]),
        "trust_v": float(radius[-1]),
        "elastic": bool(master_info.get("elastic", False)),
        "master_slack": float(master_info.get("slack", 0.0)),
        "accepted": True,
        "seconds": seconds,
        "z": anchor.z.tolist(),
    }


def _merit(anchor: Anchor, conf: ConfidenceConfig, opts: SolveOptions) -> float:
    viol = max(0.0, -anchor.stability_margin(conf))
    viol += sum(float(np.sum(np.maximum(0.0, -m))) for m in anchor.margins.values())
    return anchor.cost + opts.merit_penalty * viol


def _feasible(anchor: Anchor, conf: ConfidenceConfig) -> bool:
    return anchor.stability_margin(conf) >= -CUT_TOL and anchor.security_margin() >= -CUT_TOL


def _make_cut(anchor: Anchor, conf: ConfidenceConfig, k: int) -> BendersCut:
    if anchor.prob_eta is not None:
        grad = anchor.prob_grad if anchor.prob_grad is not None else np.zeros(anchor.z.size)
        return BendersCut(-anchor.prob_eta, -grad, anchor.z.copy(), -(1.0 - conf.beta_eta), k, "probability")
    return BendersCut(anchor.eta, anchor.bundle.deta_dz.copy(), anchor.z.copy(), conf.eta_bar - anchor.q_eta, k)


def solve_ccscopf(case: MicrogridCase, gmm: GmmModel, conf: ConfidenceConfig | None = None,
                  opts: SolveOptions | None = None, z0=None) -> SolveReport:
    conf = conf or ConfidenceConfig()
    opts = opts or SolveOptions()
    if gmm.d != case.n_res:
        raise ValueError(f"GMM dimension {gmm.d} does not match {case.n_res} RES units")
    z_start = case.z_default() if z0 is None else np.asarray(z0, dtype=float)
    t_start = time.perf_counter()
    oracle = _ProbabilityOracle(case, gmm, conf, opts) if opts.sensitivity_mode == "probability-perturbation" else None

    t0 = time.perf_counter()
    try:
        anchor = evaluate_anchor(case, z_start, gmm, conf, opts, oracle=oracle)
    except EvaluationFailure as exc:
        raise EvaluationFailure(f"pipeline failed at the starting set-points: {exc}") from exc
    t_anchor = time.perf_counter() - t0

    radius_max = trust_radius(case, opts.trust_pq, opts.trust_v)
    radius = radius_max.copy()
    cuts: list[BendersCut] = []
    history: list[dict] = []
    fixed = anchor
    best = anchor if _feasible(anchor, conf) else None
    status, message, converged = "iteration_cap", "", False
    infeasible_ids: list[str] = []
    last_anchor_z = anchor.z.copy()
    k = 0
    while k < opts.max_iter:
        k += 1
        t_it = time.perf_counter()
        base = anchor if opts.reanchor else fixed
        master = build_master(case, base.eq, base.bundle, base.quantiles, cuts, radius, opts.prox)
        offset = anchor.z - base.z  # zero when re-anchoring
        master.center = offset
        try:
            z_new, dz, info = solve_master(master)
        except MasterInfeasible as exc:
            infeasible_ids = exc.active
            z_new, dz, info = solve_master(master, elastic=True)
            info["infeasible"] = exc.active
        except MasterFailure as exc:
            # numerically borderline feasibility; the elastic form always has an interior
            log.info("iteration %d: %s; retrying with elastic rows", k, exc)
            z_new, dz, info = solve_master(master, elastic=True)
        predicted = master.objective(dz)
        last_anchor_z = master.anchor_z.copy()
        try:
            new = evaluate_anchor(case, z_new, gmm, conf, opts, init=anchor.eq, oracle=oracle)
        except EvaluationFailure as exc:
            radius = radius * 0.5
            history.append({"iteration": k, "accepted": False, "reason": str(exc), "trust_pq": float(radius[0]),
                            "trust_v": float(radius[-1]), "seconds": time.perf_counter() - t_it})
            log.info("iteration %d rejected: %s", k, exc)
            continue
        except _BudgetExhausted as exc:
            status, message = "budget_exhausted", str(exc)
            break
        stab_ok = new.stability_margin(conf) >= -CUT_TOL
        sec_ok = new.security_margin() >= -CUT_TOL
        cut_added = False
        if not stab_ok:
            cuts.append(_make_cut(new, conf, k))
            cut_added = True
        # ratio of actual to predicted merit decrease decides acceptance and the next radius
        m_old = _merit(anchor, conf, opts)
        m_new = _merit(new, conf, opts)
        model_now = master.objective(offset)
        model_gain = model_now - predicted
        pred = m_old - anchor.cost + model_gain - opts.merit_penalty * info.get("slack", 0.0)
        actual = m_old - m_new
        tol = opts.cost_tol * max(1.0, abs(anchor.cost))
        stationary = pred <= tol and _feasible(anchor, conf)
        accepted = (pred <= tol and (not stationary or actual >= 0)) or actual >= RATIO_ACCEPT * pred
        step = np.max(np.abs(dz - offset) / np.where(radius > 0, radius, np.inf))
        rec = _record(k, new, conf, cut_added, radius, info, time.perf_counter() - t_it, predicted)
        rec["accepted"] = bool(accepted)
        history.append(rec)
        log.info("iteration %d: cost %.6g eta %.6g margin %.3g accepted %s", k, new.cost, new.eta,
                 new.stability_margin(conf), accepted)
        if stationary:
            # the model sees no improvement from a feasible anchor under the current cuts
            if accepted and stab_ok and sec_ok:
                anchor = new
            status, converged = "optimal", True
            break
        if not accepted:
            radius = radius * 0.5
            if np.max(radius / np.where(radius_max > 0, radius_max, 1.0)) < MIN_RADIUS_RATIO:
                message = "trust region collapsed"
                break
            continue
        if actual >= RATIO_EXPAND * pred and step > 0.99:
            radius = np.minimum(radius * 2.0, radius_max)
        prev_cost = anchor.cost
        anchor = new
        if stab_ok and sec_ok and (best is None or new.cost <= best.cost):
            best = new
        if stab_ok and sec_ok and abs(new.cost - prev_cost) <= tol and model_gain <= 10 * tol:
            status, converged = "optimal", True
            break
    if status != "optimal" and status != "budget_exhausted":
        message = message or f"iteration cap of {opts.max_iter} reached"
        if infeasible_ids:
            status = "infeasible"
            message += f"; master infeasible on {len(infeasible_ids)} rows"
    final = anchor if converged or best is None else best
    if not converged and best is not None:
        message += "; returning best feasible iterate"
    it_times = [h["seconds"] for h in history]
    report = SolveReport(
        z_opt=final.z.copy(),
        expected_cost=final.cost,
        eta_final=final.eta,
        iterations=k,
        cuts=cuts,
        corrective_rounds=0,
        history=history,
        status=status,
        converged=converged,
        message=message.strip("; "),
        anchor_z=last_anchor_z if final is anchor else final.z.copy(),
        z_start=z_start.copy(),
        q_eta=final.q_eta,
        stability_ok=final.stability_margin(conf) >= -CUT_TOL,
        security_ok=final.security_margin() >= -CUT_TOL,
        infeasible_ids=infeasible_ids,
        mode=opts.sensitivity_mode,
        timing={
            "anchor_seconds": t_anchor,
            "iteration_seconds": it_times,
            "mean_iteration_seconds": float(np.mean(it_times)) if it_times else 0.0,
            "total_seconds": time.perf_counter() - t_start,
        },
        final=final,
    )
    if converged and opts.verify_samples > 0:
        report = corrective_countermeasure(report, case, gmm, conf, opts)
    return report


# ---------------------------------------------------------------- countermeasure


def _select_block(deta_dz: np.ndarray, dz: np.ndarray, g: int) -> int | None:
    """Block (0 P*, 1 Q*, 2 V*) holding the largest |d eta/dz| among entries whose block still deviates."""
    mag = np.abs(deta_dz).copy()
    for b in range(3):
        if not np.any(dz[b * g : (b + 1) * g] != 0):
            mag[b * g : (b + 1) * g] = -1.0
    if np.max(mag) < 0:
        return None
    return int(np.argmax(mag)) // g


def corrective_countermeasure(report: SolveReport, case: MicrogridCase, gmm: GmmModel,
                              conf: ConfidenceConfig | None = None, opts: SolveOptions | None = None,
                              n_samples: int | None = None, seed: int | None = None,
                              max_rounds: int | None = None, strict: bool | None = None) -> SolveReport:
    """Halve the most stability-sensitive block of set-point deviations until MC validation passes."""
    from .validation import monte_carlo_validate

    conf = conf or ConfidenceConfig()
    opts = opts or SolveOptions()
    n_samples = n_samples or opts.verify_samples or 2000
    seed = opts.seed if seed is None else seed
    max_rounds = opts.countermeasure_rounds if max_rounds is None else max_rounds
    strict = opts.verify_strict if strict is None else strict
    g = case.g
    anchor_z = report.anchor_z if report.anchor_z is not None else report.z_start
    z = np.asarray(report.z_opt, dtype=float).copy()
    dz = z - anchor_z
    stab_opts = dataclasses.replace(opts.stability, tol=max(opts.stability.tol, 1e-6))

    def check(zz):
        val = monte_carlo_validate(case, zz, gmm, n_samples, seed, eta_bar=conf.eta_bar, stability=stab_opts)
        return val, val.satisfies(conf, allow_half_width=not strict)

    val, ok = check(z)
    rounds = 0
    trail = [{"round": 0, "prob_eta": val.prob_eta, "dz_inf": float(np.max(np.abs(dz))), "block": None}]
    final = report.final
    while not ok and rounds < max_rounds:
        if final is None or not np.array_equal(final.z, z):
            final = evaluate_anchor(case, z, gmm, conf, dataclasses.replace(opts, sensitivity_mode="analytic"))
        block = _select_block(final.bundle.deta_dz, dz, g)
        if block is None:
            break
        rounds += 1
        dz[block * g : (block + 1) * g] *= 0.5
        z = anchor_z + dz
        val, ok = check(z)
        trail.append({"round": rounds, "prob_eta": val.prob_eta, "dz_inf": float(np.max(np.abs(dz))),
                      "block": ("P*", "Q*", "V*")[block]})
    if rounds > 0:
        final = evaluate_anchor(case, z, gmm, conf, dataclasses.replace(opts, sensitivity_mode="analytic"))
    out = dataclasses.replace(report)
    out.history = list(report.history)
    out.corrective_rounds = rounds
    out.verified = bool(ok)
    out.countermeasure_flag = not ok
    out.verification = {**val.summary(), "rounds": trail, "samples": n_samples, "seed": seed}
    if rounds > 0 and final is not None:
        out.z_opt = z.copy()
        out.expected_cost = final.cost
        out.eta_final = final.eta
        out.q_eta = final.q_eta
        out.stability_ok = final.stability_margin(conf) >= -CUT_TOL
        out.security_ok = final.security_margin() >= -CUT_TOL
        out.final = final
    if not ok:
        out.message = (out.message + "; " if out.message else "") + (
            f"countermeasure stopped after {rounds} rounds without restoring the chance constraints")
    return out
