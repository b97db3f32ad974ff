"""Monte-Carlo check of every chance constraint through the full nonlinear pipeline.

Samples are drawn in the calling process from one seed, so a run is
reproducible regardless of how many worker processes evaluate them.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

from .case_model import MicrogridCase
from .power_flow import NonConvergence, SingularNewtonJacobian, solve_equilibrium
from .sdp import SolverFailure
from .small_signal import SingularAlgebraicBlock, assemble, reduce
from .stability import StabilityOptions, stability_index
from .uncertainty import GmmModel, ScalarMixture, project, sample

Z95 = 1.96
GRID_POINTS = 200
MC_STABILITY = StabilityOptions(tol=1e-6)


def half_width(p, n: int):
    p = np.asarray(p, dtype=float)
    return Z95 * np.sqrt(p * (1.0 - p) / n)


@dataclass
class ValidationReport:
    prob_eta: float
    prob_eta_hw: float
    prob_pg: np.ndarray  # (g, 2): Pr(P >= P_min), Pr(P <= P_max)
    prob_qg: np.ndarray
    prob_v: np.ndarray  # (n, 2)
    eta_samples: np.ndarray  # nan where the pipeline failed
    mu_w: float
    failures: int
    n: int
    seed: int | None
    eta_bar: float
    arms_pdf: float | None = None
    arms_cdf: float | None = None
    seconds: float = 0.0
    failure_reasons: dict = field(default_factory=dict)

    def half_widths(self, p):
        return half_width(p, self.n)

    def satisfies(self, conf, allow_half_width: bool = False) -> bool:
        """All empirical probabilities at or above their 1 - beta levels."""
        def ok(p, level):
            p = np.asarray(p, dtype=float)
            slack = self.half_widths(p) if allow_half_width else 0.0
            return bool(np.all(p + slack >= level))

        return (
            ok(self.prob_eta, 1.0 - conf.beta_eta)
            and ok(self.prob_pg, 1.0 - conf.beta_g)
            and ok(self.prob_qg, 1.0 - conf.beta_g)
            and ok(self.prob_v, 1.0 - conf.beta_v)
        )

    def summary(self) -> dict:
        return {
            "prob_eta": self.prob_eta,
            "prob_eta_half_width": self.prob_eta_hw,
            "min_prob_pg": float(np.min(self.prob_pg)),
            "min_prob_qg": float(np.min(self.prob_qg)),
            "min_prob_v": float(np.min(self.prob_v)),
            "failures": self.failures,
            "n": self.n,
        }

    def to_dict(self) -> dict:
        finite = self.eta_samples[np.isfinite(self.eta_samples)]
        return {
            "n": self.n,
            "seed": self.seed,
            "eta_bar": self.eta_bar,
            "prob_eta": self.prob_eta,
            "prob_eta_half_width": self.prob_eta_hw,
            "prob_pg": self.prob_pg.tolist(),
            "prob_pg_half_width": self.half_widths(self.prob_pg).tolist(),
            "prob_qg": self.prob_qg.tolist(),
            "prob_qg_half_width": self.half_widths(self.prob_qg).tolist(),
            "prob_v": self.prob_v.tolist(),
            "prob_v_half_width": self.half_widths(self.prob_v).tolist(),
            "mu_w": self.mu_w,
            "failures": self.failures,
            "failure_reasons": self.failure_reasons,
            "arms_pdf": self.arms_pdf,
            "arms_cdf": self.arms_cdf,
            "eta_mean": float(np.mean(finite)) if finite.size else None,
            "eta_std": float(np.std(finite)) if finite.size else None,
            "seconds": self.seconds,
        }


def _evaluate_chunk(args):
    case, z, eps, init, stab = args
    n = len(eps)
    eta = np.full(n, np.nan)
    pg = np.full((n, case.g), np.nan)
    qg = np.full((n, case.g), np.nan)
    v = np.full((n, case.n), np.nan)
    reasons: dict[str, int] = {}
    for i, e in enumerate(eps):
        try:
            eq = solve_equilibrium(case, z, e, init=init)
            pg[i], qg[i], v[i] = eq.p_g, eq.q_g, eq.v
            eta[i] = stability_index(reduce(assemble(case, eq)).j, stab).eta
        except (NonConvergence, SingularNewtonJacobian, SingularAlgebraicBlock, SolverFailure,
                np.linalg.LinAlgError) as exc:
            reasons[type(exc).__name__] = reasons.get(type(exc).__name__, 0) + 1
    return eta, pg, qg, v, reasons


def _bounds_probability(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    # nan rows fail both comparisons
    return np.column_stack([np.mean(x >= lo, axis=0), np.mean(x <= hi, axis=0)])


def monte_carlo_validate(
    case: MicrogridCase,
    z,
    gmm: GmmModel,
    n: int = 10_000,
    seed: int | None = 0,
    eta_bar: float = -0.15,
    stability: StabilityOptions | None = None,
    eps_samples: np.ndarray | None = None,
    workers: int = 1,
    reference: ScalarMixture | None = None,
) -> ValidationReport:
    """Empirical chance-constraint probabilities at set-points ``z``.

    Failed samples count as violations of every constraint.  ``reference`` is
    an estimated eta distribution whose ARMS against the samples is reported.
    """
    t0 = time.perf_counter()
    stab = stability or MC_STABILITY
    z = np.asarray(z, dtype=float)
    eps = sample(gmm, n, np.random.default_rng(seed)) if eps_samples is None else np.atleast_2d(eps_samples)
    n = len(eps)
    if n < 1:
        raise ValueError("need at least one sample")
    init = solve_equilibrium(case, z)
    if workers > 1 and n > workers:
        chunks = np.array_split(eps, workers)
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_evaluate_chunk, [(case, z, c, init, stab) for c in chunks]))
    else:
        parts = [_evaluate_chunk((case, z, eps, init, stab))]
    eta = np.concatenate([p[0] for p in parts])
    pg = np.vstack([p[1] for p in parts])
    qg = np.vstack([p[2] for p in parts])
    v = np.vstack([p[3] for p in parts])
    reasons: dict[str, int] = {}
    for p in parts:
        for key, c in p[4].items():
            reasons[key] = reasons.get(key, 0) + c

    pmin = np.array([d.p_min for d in case.dgs])
    pmax = np.array([d.p_max for d in case.dgs])
    qmin = np.array([d.q_min for d in case.dgs])
    qmax = np.array([d.q_max for d in case.dgs])
    vmin = np.array([b.v_min for b in case.buses])
    vmax = np.array([b.v_max for b in case.buses])
    prob_eta = float(np.mean(eta <= eta_bar))
    report = ValidationReport(
        prob_eta=prob_eta,
        prob_eta_hw=float(half_width(prob_eta, n)),
        prob_pg=_bounds_probability(pg, pmin, pmax),
        prob_qg=_bounds_probability(qg, qmin, qmax),
        prob_v=_bounds_probability(v, vmin, vmax),
        eta_samples=eta,
        mu_w=uncertainty_degree(eps, [r.p_forecast for r in case.res_units]) if case.n_res else 0.0,
        failures=int(np.count_nonzero(~np.isfinite(eta))),
        n=n,
        seed=seed,
        eta_bar=eta_bar,
        failure_reasons=reasons,
    )
    finite = eta[np.isfinite(eta)]
    if reference is not None and finite.size >= 2 and np.ptp(finite) > 0:
        report.arms_pdf = arms(reference.pdf, finite, kind="pdf")
        report.arms_cdf = arms(reference.cdf, finite, kind="cdf")
    report.seconds = time.perf_counter() - t0
    return report


def eta_distribution(case: MicrogridCase, z, gmm: GmmModel, stability: StabilityOptions | None = None,
                     bundle=None) -> ScalarMixture:
    """Linearized eta distribution eta0 + (d eta/d eps)'eps under the mixture."""
    if bundle is None:
        from .sensitivity import build_s_matrix, chain_rule_sensitivities

        eq = solve_equilibrium(case, z)
        stab = stability_index(reduce(assemble(case, eq)).j, stability)
        bundle = chain_rule_sensitivities(case, eq, stab, build_s_matrix(case, eq))
    mix = project(gmm, bundle.deta_deps)
    return ScalarMixture(mix.weights, mix.means + bundle.eta0, mix.variances)


def uncertainty_degree(eps_samples, forecasts) -> float:
    """Mean per-unit ratio eps_i / forecast_i.

    A single error vector gives the signed mean; a sample matrix (one row per
    sample) gives the average magnitude of the per-sample means.
    """
    f = np.asarray(forecasts, dtype=float)
    e = np.asarray(eps_samples, dtype=float)
    if f.size == 0 or np.any(f == 0):
        raise ValueError("forecasts must be non-zero")
    if e.shape[-1] != f.size:
        raise ValueError(f"error vectors have {e.shape[-1]} entries, expected {f.size}")
    per = np.mean(e / f, axis=-1)
    if e.ndim == 1:
        return float(per)
    return float(np.mean(np.abs(per)))


def empirical_cdf(samples):
    s = np.sort(np.asarray(samples, dtype=float))

    def f(x):
        return np.searchsorted(s, np.asarray(x, dtype=float), side="right") / s.size

    return f


def empirical_pdf(samples):
    return gaussian_kde(np.asarray(samples, dtype=float), bw_method="silverman")


def default_grid(samples, points: int = GRID_POINTS) -> np.ndarray:
    s = np.asarray(samples, dtype=float)
    return np.linspace(np.min(s), np.max(s), points)


def arms(reference, empirical, grid=None, kind: str = "cdf") -> float:
    """Root-mean-square gap between a candidate curve and the empirical PDF (KDE) or CDF (step)."""
    s = np.asarray(empirical, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("empirical samples are empty")
    grid = default_grid(s) if grid is None else np.asarray(grid, dtype=float)
    if grid.size < 2:
        raise ValueError("need at least two grid points")
    if kind == "cdf":
        emp = empirical_cdf(s)(grid)
    elif kind == "pdf":
        emp = empirical_pdf(s)(grid)
    else:
        raise ValueError("kind must be 'pdf' or 'cdf'")
    cand = np.asarray(reference(grid), dtype=float)
    return float(np.sqrt(np.mean((cand - emp) ** 2)))


def write_eta_samples(path, report: ValidationReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "eta"])
        for i, e in enumerate(report.eta_samples):
            w.writerow([i, repr(float(e))])


def write_pdf_cdf_grid(path, report: ValidationReport, reference: ScalarMixture | None = None) -> None:
    finite = report.eta_samples[np.isfinite(report.eta_samples)]
    cols = ["eta", "empirical_pdf", "empirical_cdf"]
    if reference is not None:
        cols += ["estimated_pdf", "estimated_cdf"]
    rows = []
    if finite.size >= 2 and np.ptp(finite) > 0:
        grid = default_grid(finite)
        data = [grid, empirical_pdf(finite)(grid), empirical_cdf(finite)(grid)]
        if reference is not None:
            data += [reference.pdf(grid), reference.cdf(grid)]
        rows = np.column_stack(data)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(float(x)) for x in r])


def perturbation_baselines(case: MicrogridCase, gmm: GmmModel, conf=None, mode: str = "eta-perturbation",
                           opts=None, max_iter: int | None = None):
    """Run the Benders loop with numerically perturbed sensitivities; returns (report, timing)."""
    from .ccopf import ConfidenceConfig, SolveOptions, solve_ccscopf

    if mode not in ("eta-perturbation", "probability-perturbation", "analytic"):
        raise ValueError(f"unknown mode {mode!r}")
    opts = opts or SolveOptions()
    changes = {"sensitivity_mode": mode}
    if max_iter is not None:
        changes["max_iter"] = max_iter
    opts = dataclasses.replace(opts, **changes)
    t0 = time.perf_counter()
    report = solve_ccscopf(case, gmm, conf or ConfidenceConfig(), opts)
    its = report.timing["iteration_seconds"]
    timing = {
        "mode": mode,
        "total_seconds": time.perf_counter() - t0,
        "iterations": len(its),
        "mean_iteration_seconds": float(np.mean(its)) if its else float("nan"),
        "max_iteration_seconds": float(np.max(its)) if its else float("nan"),
    }
    return report, timing
