"""SDP stability index of a dynamic Jacobian and its derivative with respect to J.

    eta(J) = min eta  s.t.  eta I - J'Phi - Phi J >= 0,  eps I <= Phi <= I

eta < 0 certifies that V = x'Phi x decays along dx/dt = J x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sdp
from .sdp import SolverFailure

COMPLEMENTARITY_TOL = 1e-6
MULTIPLICITY_RTOL = 1e-3


class NotOptimal(RuntimeError):
    pass


@dataclass(frozen=True)
class StabilityOptions:
    eps_lmi: float = 1e-4
    tol: float = 1e-8
    max_iter: int = 100
    backend: str = "ipm"  # ipm | clarabel | cvxopt

    def __post_init__(self):
        if not 0.0 < self.eps_lmi < 1.0:
            raise ValueError(f"eps_lmi must lie in (0, 1), got {self.eps_lmi}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.backend not in sdp.BACKENDS:
            raise ValueError(f"unknown SDP backend {self.backend!r}; choose from {sorted(sdp.BACKENDS)}")


@dataclass
class StabilityResult:
    eta: float
    phi: np.ndarray
    dual_lyap: np.ndarray  # unit trace at the optimum
    dual_lower: np.ndarray
    dual_upper: np.ndarray
    status: str
    complementarity: float
    multiplicity: int
    j_fingerprint: str = ""
    deta_dj: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def _fingerprint(j: np.ndarray) -> str:
    import hashlib

    return hashlib.sha1(np.ascontiguousarray(j, dtype=float).tobytes()).hexdigest()


def stability_index(j, opts: StabilityOptions | None = None) -> StabilityResult:
    opts = opts or StabilityOptions()
    j = np.asarray(j, dtype=float)
    if j.ndim != 2 or j.shape[0] != j.shape[1]:
        raise ValueError(f"J must be square, got shape {j.shape}")
    if not np.all(np.isfinite(j)):
        raise ValueError("J has non-finite entries")
    problem = sdp.LyapunovIndexSdp(j, opts.eps_lmi)
    solve = sdp.BACKENDS[opts.backend]
    sol = solve(problem, tol=opts.tol, max_iter=opts.max_iter)
    n = j.shape[0]
    phi = sdp.smat(sol.y[:-1], n)
    x1, x2, x3 = (sdp.sym(x) for x in sol.x)
    comp = max(abs(float(np.vdot(x, z))) for x, z in zip(sol.x, sol.z))
    lam = np.linalg.eigvalsh(x1)
    mult = int(np.sum(lam >= MULTIPLICITY_RTOL * lam[-1])) if lam[-1] > 0 else 0
    return StabilityResult(
        eta=float(sol.y[-1]),
        phi=phi,
        dual_lyap=x1,
        dual_lower=x2,
        dual_upper=x3,
        status=sol.status,
        complementarity=comp,
        multiplicity=mult,
        j_fingerprint=_fingerprint(j),
        info={"iterations": sol.iterations, "rel_gap": sol.rel_gap, "backend": opts.backend},
    )


def eta_jacobian_sensitivity(result: StabilityResult, j) -> np.ndarray:
    """d eta / d J_mn = 2 (Phi X)_mn with X the unit-trace dual of the Lyapunov LMI.

    Differentiating the Lagrangian in J: only <X, J'Phi + Phi J> = 2 tr(X Phi J)
    depends on J.  When the dual is not unique (repeated extreme eigenvalue)
    this is one element of the subdifferential; ``result.multiplicity`` flags it.
    """
    j = np.asarray(j, dtype=float)
    if result.j_fingerprint and result.j_fingerprint != _fingerprint(j):
        raise ValueError("stability result was computed for a different J")
    if result.complementarity > COMPLEMENTARITY_TOL:
        raise NotOptimal(f"complementarity residual {result.complementarity:.2e} exceeds {COMPLEMENTARITY_TOL:.0e}")
    tr = float(np.trace(result.dual_lyap))
    if not abs(tr - 1.0) <= 1e-4:
        raise NotOptimal(f"Lyapunov dual has trace {tr:.6f}, expected 1")
    g = 2.0 * result.phi @ result.dual_lyap
    result.deta_dj = g
    return g


def eta(j, opts: StabilityOptions | None = None) -> float:
    return stability_index(j, opts).eta


__all__ = [
    "NotOptimal",
    "SolverFailure",
    "StabilityOptions",
    "StabilityResult",
    "eta",
    "eta_jacobian_sensitivity",
    "stability_index",
]
