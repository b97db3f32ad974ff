"""Gaussian-mixture models of RES forecast error and their scalar projections."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import solve_triangular
from scipy.special import logsumexp, ndtr

WEIGHT_PRUNE = 1e-8
VAR_FLOOR = 1e-300


class DegenerateComponent(UserWarning):
    pass


class GmmFormatError(ValueError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, d)
    covariances: np.ndarray  # (M, d, d)
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float).reshape(len(self.weights), -1)
        d = self.means.shape[1]
        self.covariances = np.asarray(self.covariances, dtype=float).reshape(len(self.weights), d, d)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if not np.allclose(self.covariances, np.swapaxes(self.covariances, 1, 2), rtol=0, atol=1e-15 * max(
                1.0, float(np.max(np.abs(self.covariances))))):
            raise ValueError("covariances must be symmetric")

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mu = self.mean()
        dev = self.means - mu
        return np.einsum("m,mij->ij", self.weights, self.covariances) + np.einsum("m,mi,mj->ij", self.weights, dev, dev)

    def log_pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return logsumexp(_component_logpdf(x, self.means, self.covariances) + np.log(self.weights), axis=1)


@dataclass
class ScalarMixture:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if np.any(self.variances <= 0):
            raise ValueError("scalar mixture variances must be positive")

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variances)

    def mean(self) -> float:
        return float(self.weights @ self.means)

    def variance(self) -> float:
        mu = self.mean()
        return float(self.weights @ (self.variances + (self.means - mu) ** 2))

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)[..., None]
        s = self.std
        return np.sum(self.weights * np.exp(-0.5 * ((x - self.means) / s) ** 2) / (s * math.sqrt(2 * math.pi)), axis=-1)

    def cdf(self, x) -> np.ndarray:
        return cdf(self, x)

    def inverse_cdf(self, p) -> np.ndarray:
        return inverse_cdf(self, p)


def _component_logpdf(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(x_i; mu_m, Sigma_m), shape (N, M)."""
    n, d = x.shape
    out = np.empty((n, len(means)))
    eye = np.eye(d)
    for k, (mu, cov) in enumerate(zip(means, covs)):
        chol = np.linalg.cholesky(cov)
        white = (x - mu) @ solve_triangular(chol, eye, lower=True, check_finite=False).T
        out[:, k] = -0.5 * np.einsum("ij,ij->i", white, white) - np.sum(np.log(np.diag(chol))) \
            - 0.5 * d * math.log(2 * math.pi)
    return out


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1)
    return top + np.log(np.exp(a - top[:, None]).sum(axis=1))


def _floor_spd(cov: np.ndarray, floor: float) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    lam, vec = np.linalg.eigh(cov)
    if lam[0] >= floor:
        return cov
    return (vec * np.maximum(lam, floor)) @ vec.T


def fit_gmm(
    samples,
    m: int = 10,
    max_iter: int = 1000,
    tol: float = 1e-6,
    seed: int = 0,
    cov_floor: float = 1e-9,
) -> GmmModel:
    """Maximum-likelihood mixture by EM from a seeded k-means++ start.

    EM runs on coordinates standardized to unit variance, so ``cov_floor``
    bounds the smallest eigenvalue of each component covariance relative to
    the data scale.  Stops when the per-sample log-likelihood gain drops
    below ``tol``; ``info`` holds the likelihood trace and a convergence flag.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("samples must be an N x d matrix with N >= 1")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    if m < 1:
        raise ValueError("component count must be at least 1")
    n, d = x.shape
    if n < m:
        warnings.warn(f"only {n} samples for {m} components; using {n}", DegenerateComponent, stacklevel=2)
        m = n
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - center) / scale

    if m == 1:
        cov = _floor_spd(np.atleast_2d(np.cov(xs, rowvar=False, bias=True)), cov_floor)
        model = _unstandardize(np.ones(1), np.zeros((1, d)) + xs.mean(axis=0), cov[None], center, scale)
        ll = float(np.mean(model.log_pdf(x)))
        model.info = {"converged": True, "iterations": 0, "log_likelihood": [ll], "pruned": 0, "seed": seed}
        return model

    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # empty clusters get zero weight and are pruned below
        _, labels = kmeans2(xs, m, minit="++", seed=rng, missing="warn")
    resp = np.zeros((n, m))
    resp[np.arange(n), labels] = 1.0
    weights, means, covs = _m_step(xs, resp, cov_floor)
    weights, means, covs, pruned = _prune(weights, means, covs)
    trace = []
    converged = False
    best = None
    it = 0
    for it in range(1, max_iter + 1):
        logp = _component_logpdf(xs, means, covs) + np.log(weights)
        lse = _logsumexp_rows(logp)
        ll = float(np.mean(lse))
        trace.append(ll)
        if best is None or ll >= best[0]:
            best = (ll, weights, means, covs)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol:
            converged = True
            break
        resp = np.exp(logp - lse[:, None])
        weights, means, covs = _m_step(xs, resp, cov_floor)
        weights, means, covs, k = _prune(weights, means, covs)
        pruned += k
    _, weights, means, covs = best
    # likelihoods were taken in standardized coordinates; shift to the data scale
    jac = float(np.sum(np.log(scale)))
    model = _unstandardize(weights, means, covs, center, scale)
    model.info = {
        "converged": converged,
        "iterations": it,
        "log_likelihood": [v - jac for v in trace],
        "pruned": pruned,
        "seed": seed,
    }
    if not converged:
        warnings.warn(f"EM hit the {max_iter}-iteration cap; returning the best iterate", RuntimeWarning, stacklevel=2)
    return model


def _m_step(xs: np.ndarray, resp: np.ndarray, floor: float):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    safe = np.where(nk > 0, nk, 1.0)
    means = (resp.T @ xs) / safe[:, None]
    covs = np.empty((len(nk), xs.shape[1], xs.shape[1]))
    for k in range(len(nk)):
        dev = xs - means[k]
        c = (resp[:, k, None] * dev).T @ dev / safe[k]
        covs[k] = _floor_spd(c, floor)
    return weights, means, covs


def _prune(weights, means, covs):
    keep = weights >= WEIGHT_PRUNE
    dropped = int(np.sum(~keep))
    if dropped:
        warnings.warn(f"pruned {dropped} mixture component(s) with weight below {WEIGHT_PRUNE:g}",
                      DegenerateComponent, stacklevel=3)
        weights = weights[keep] / weights[keep].sum()
        means, covs = means[keep], covs[keep]
    return weights, means, covs, dropped


def _unstandardize(weights, means, covs, center, scale) -> GmmModel:
    mu = center + means * scale
    cov = covs * scale[None, :, None] * scale[None, None, :]
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    w = np.asarray(weights, dtype=float)
    return GmmModel(w / w.sum(), mu, cov)


def project(gmm: GmmModel, a) -> ScalarMixture:
    """Distribution of a'eps for eps ~ gmm: again a mixture, component by component."""
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape != (gmm.d,):
        raise ValueError(f"projection vector has length {a.size}, mixture dimension is {gmm.d}")
    var = np.einsum("i,mij,j->m", a, gmm.covariances, a)
    if not np.any(a):
        warnings.warn("projection onto the zero vector; variances floored", DegenerateComponent, stacklevel=2)
    return ScalarMixture(gmm.weights.copy(), gmm.means @ a, np.maximum(var, VAR_FLOOR))


def cdf(mix: ScalarMixture, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    val = np.sum(mix.weights * ndtr((x[..., None] - mix.means) / mix.std), axis=-1)
    return np.clip(val, 0.0, 1.0)


def quantile_bracket(mix: ScalarMixture) -> tuple[float, float]:
    s = mix.std
    return float(np.min(mix.means - 12 * s)), float(np.max(mix.means + 12 * s))


def inverse_cdf(mix: ScalarMixture, p, abs_tol: float = 1e-10) -> np.ndarray | float:
    """Quantile by bisection, continued to float resolution so tiny-scale mixtures stay exact.

    ``abs_tol`` is an upper bound on the bracket width at exit.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise ValueError("probability must lie strictly between 0 and 1")
    lo0, hi0 = quantile_bracket(mix)
    lo = np.full(p_arr.shape, lo0)
    hi = np.full(p_arr.shape, hi0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = cdf(mix, mid) < p_arr
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        width = hi - lo
        if np.all((width <= abs_tol) & (width <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi))))):
            break
    out = 0.5 * (lo + hi)
    return float(out) if out.ndim == 0 else out


def project_rows(gmm: GmmModel, rows) -> tuple[np.ndarray, np.ndarray]:
    """Component means and variances of a_k'eps for every row a_k, each shape (K, M)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    means = rows @ gmm.means.T
    var = np.einsum("ki,mij,kj->km", rows, gmm.covariances, rows)
    return means, np.maximum(var, VAR_FLOOR)


def batch_inverse_cdf(weights, means, variances, p) -> np.ndarray:
    """Quantiles of K scalar mixtures sharing one weight vector; bisection run to float resolution."""
    w = np.asarray(weights, dtype=float)
    mu = np.atleast_2d(np.asarray(means, dtype=float))
    sd = np.sqrt(np.atleast_2d(np.asarray(variances, dtype=float)))
    p = np.broadcast_to(np.asarray(p, dtype=float), (mu.shape[0],))
    if np.any(~((p > 0) & (p < 1))):
        raise ValueError("probability must lie strictly between 0 and 1")
    lo = np.min(mu - 12 * sd, axis=1)
    hi = np.max(mu + 12 * sd, axis=1)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = np.sum(w * ndtr((mid[:, None] - mu) / sd), axis=1) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)))):
            break
    return 0.5 * (lo + hi)


def sample(gmm: GmmModel, n: int, seed) -> np.ndarray:
    """Draw n rows: component by weight, then mu + L z with L the Cholesky factor."""
    if n < 1:
        raise ValueError("sample count must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    comp = rng.choice(gmm.m, size=n, p=gmm.weights)
    zs = rng.standard_normal((n, gmm.d))
    chol = np.stack([_safe_cholesky(c) for c in gmm.covariances])
    return gmm.means[comp] + np.einsum("nij,nj->ni", chol[comp], zs)


def _safe_cholesky(c: np.ndarray) -> np.ndarray:
    if not np.any(c):
        return np.zeros_like(c)
    lam, vec = np.linalg.eigh(0.5 * (c + c.T))
    if lam[0] > 0:
        return np.linalg.cholesky(c)
    return vec * np.sqrt(np.maximum(lam, 0.0))  # PSD square root for singular components


def point_mass(mean) -> GmmModel:
    """Degenerate mixture with all mass at ``mean`` (zero covariance)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return GmmModel(np.ones(1), mean[None, :], np.zeros((1, mean.size, mean.size)), {"degenerate": True})


# ------------------------------------------------------------------ I/O


def gmm_to_dict(gmm: GmmModel) -> dict:
    return {
        "weights": gmm.weights.tolist(),
        "means": gmm.means.tolist(),
        "covariances": gmm.covariances.tolist(),
        "info": {k: v for k, v in gmm.info.items() if k != "log_likelihood"},
    }


def gmm_from_dict(data: dict) -> GmmModel:
    try:
        w = np.asarray(data["weights"], dtype=float)
        mu = np.asarray(data["means"], dtype=float)
        cov = np.asarray(data["covariances"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise GmmFormatError(f"malformed mixture data: {exc!r}") from exc
    if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3 or mu.shape[0] != w.size or cov.shape != (
            w.size, mu.shape[1], mu.shape[1]):
        raise GmmFormatError("mixture arrays have inconsistent shapes")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
        raise GmmFormatError("mixture data contain non-finite values")
    try:
        model = GmmModel(w, mu, cov)
    except ValueError as exc:
        raise GmmFormatError(f"invalid mixture: {exc}") from exc
    for k, c in enumerate(model.covariances):
        if np.linalg.eigvalsh(c)[0] < -1e-12 * max(1.0, float(np.max(np.abs(c)))):
            raise GmmFormatError(f"covariance of component {k} is not positive semidefinite")
    model.info = dict(data.get("info", {}))
    return model


def save_gmm(gmm: GmmModel, path) -> None:
    Path(path).write_text(json.dumps(gmm_to_dict(gmm), indent=1))


def load_gmm(path) -> GmmModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mixture file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise GmmFormatError(f"{path}: invalid JSON ({exc})") from exc
    return gmm_from_dict(data)


def read_errors_csv(path) -> tuple[list[int], np.ndarray]:
    """Rows are observations, columns RES buses; the header row holds bus ids."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"error sample file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: needs a header row and at least one observation")
    try:
        buses = [int(float(h)) for h in rows[0]]
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != len(buses):
        raise ValueError(f"{path}: every row must have {len(buses)} columns")
    return buses, data


def write_errors_csv(path, buses, data) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([int(b) for b in buses])
        for row in np.asarray(data, dtype=float):
            w.writerow([repr(float(v)) for v in row])


# ------------------------------------------------------------ synthetic data


def bimodal_forecast_errors(
    forecasts,
    n: int,
    seed: int = 0,
    degree: float = 0.03,
    spread: float = 0.2,
    low_weight: float = 0.35,
    correlation: float = 0.5,
    max_ratio: float | None = 0.05,
) -> np.ndarray:
    """Errors whose per-unit ratios cluster around -degree and +degree.

    Each draw picks one regime for all units (a shared weather state); ratios
    scatter about the regime centre with relative width ``spread`` and an
    equicorrelated structure.  Draws with any |ratio| above ``max_ratio`` are
    rejected.
    """
    forecasts = np.asarray(forecasts, dtype=float)
    d = forecasts.size
    rng = np.random.default_rng(seed)
    cov = spread**2 * degree**2 * ((1 - correlation) * np.eye(d) + correlation * np.ones((d, d)))
    chol = np.linalg.cholesky(cov)
    out = np.empty((0, d))
    while out.shape[0] < n:
        k = 2 * (n - out.shape[0]) + 16
        regime = np.where(rng.random(k) < low_weight, -degree, degree)
        ratio = regime[:, None] + rng.standard_normal((k, d)) @ chol.T
        if max_ratio is not None:
            ratio = ratio[np.all(np.abs(ratio) <= max_ratio, axis=1)]
        out = np.vstack([out, ratio])
    return out[:n] * forecasts
