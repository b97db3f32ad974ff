"""Linearization of the droop DAE and reduction to the dynamic Jacobian J.

States x = [alpha_r (g-1), omega_G (g), V_G (g)], algebraic y = [alpha_L (d), V_L (d)]
with d the number of buses without a DG.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from . import _core
from .case_model import MicrogridCase
from .power_flow import TOL, Equilibrium, residuals

COND_LIMIT = 1e12


class SingularAlgebraicBlock(RuntimeError):
    pass


class UnconvergedEquilibrium(ValueError):
    pass


@dataclass
class SmallSignalModel:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    j: np.ndarray | None = None
    cond_d: float | None = None

    @property
    def n_states(self) -> int:
        return self.a.shape[0]


def _blocks(case: MicrogridCase, u: np.ndarray):
    net = case.network
    n = net.n
    theta = np.zeros(n)
    theta[net.nonref_pos] = u[: n - 1]
    v = np.ascontiguousarray(u[n - 1 : 2 * n - 1])
    dpt, dpv, dqt, dqv = _core.injection_jacobian(net.g, net.b, theta, v)

    g = len(net.dg_pos)
    gr = g - 1
    nl = len(net.load_pos)
    dg, dgr, ld = net.dg_pos, net.dg_nonref, net.load_pos
    kpf = (net.kp * net.fp)[:, None]
    kqf = (net.kq * net.fq)[:, None]

    nx = 3 * g - 1
    a = np.zeros((nx, nx))
    bm = np.zeros((nx, 2 * nl))
    so, sv = gr, gr + g  # first omega row, first V row

    # angle rows: rate * (omega_i - omega_ref)
    ref_k = int(np.flatnonzero(dg == net.ref)[0])
    others = [k for k in range(g) if k != ref_k]
    a[np.arange(gr), so + ref_k] = -net.angle_rate
    a[np.arange(gr), so + np.array(others, dtype=np.intp)] = net.angle_rate

    a[so:sv, :gr] = -kpf * dpt[np.ix_(dg, dgr)]
    a[so:sv, so:sv] = -np.diag(net.fp)
    a[so:sv, sv:] = -kpf * dpv[np.ix_(dg, dg)]
    a[sv:, :gr] = -kqf * dqt[np.ix_(dg, dgr)]
    a[sv:, sv:] = -kqf * dqv[np.ix_(dg, dg)] - np.diag(net.fq)

    bm[so:sv, :nl] = -kpf * dpt[np.ix_(dg, ld)]
    bm[so:sv, nl:] = -kpf * dpv[np.ix_(dg, ld)]
    bm[sv:, :nl] = -kqf * dqt[np.ix_(dg, ld)]
    bm[sv:, nl:] = -kqf * dqv[np.ix_(dg, ld)]

    c = np.zeros((2 * nl, nx))
    c[:nl, :gr] = -dpt[np.ix_(ld, dgr)]
    c[:nl, sv:] = -dpv[np.ix_(ld, dg)]
    c[nl:, :gr] = -dqt[np.ix_(ld, dgr)]
    c[nl:, sv:] = -dqv[np.ix_(ld, dg)]

    d = np.empty((2 * nl, 2 * nl))
    d[:nl, :nl] = -dpt[np.ix_(ld, ld)]
    d[:nl, nl:] = -dpv[np.ix_(ld, ld)]
    d[nl:, :nl] = -dqt[np.ix_(ld, ld)]
    d[nl:, nl:] = -dqv[np.ix_(ld, ld)]
    return a, bm, c, d


def assemble(case: MicrogridCase, eq: Equilibrium, tol: float = TOL) -> SmallSignalModel:
    """DAE blocks A, B, C, D at a converged equilibrium (J left unset)."""
    res = residuals(case, eq, eq.z, eq.eps_r)
    norm = float(np.max(np.abs(res))) if res.size else 0.0
    if not norm <= max(tol, 10 * eq.residual_norm):
        raise UnconvergedEquilibrium(f"equilibrium residual {norm:.3e} exceeds tolerance {tol:.1e}")
    return SmallSignalModel(*_blocks(case, eq.state))


def _rcond(lu_piv, anorm: float) -> float:
    rcond, info = lapack.dgecon(lu_piv[0], anorm, norm="1")
    return float(rcond) if info == 0 else 0.0


def reduce(model: SmallSignalModel) -> SmallSignalModel:
    """J = A - B D^{-1} C through an LU solve; the condition estimate of D is kept."""
    a, b, c, d = model.a, model.b, model.c, model.d
    if d.size == 0:
        return SmallSignalModel(a, b, c, d, a.copy(), 1.0)
    if not np.all(np.isfinite(d)):
        raise SingularAlgebraicBlock("algebraic block has non-finite entries")
    anorm = float(np.max(np.sum(np.abs(d), axis=0)))
    try:
        with warnings.catch_warnings():
            # an exactly singular D is reported through the condition check below
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(d, check_finite=False)
    except (sla.LinAlgError, ValueError) as exc:
        raise SingularAlgebraicBlock(str(exc)) from exc
    rc = _rcond(lu, anorm) if anorm > 0 else 0.0
    cond = np.inf if rc == 0.0 else 1.0 / rc
    if cond > COND_LIMIT:
        raise SingularAlgebraicBlock(f"algebraic block is numerically singular (cond ~ {cond:.2e})")
    j = a - b @ sla.lu_solve(lu, c, check_finite=False)
    return SmallSignalModel(a, b, c, d, j, cond)


def reduced_jacobian(case: MicrogridCase, state: np.ndarray) -> np.ndarray:
    """J straight from a state vector [alpha, V, omega], skipping checks; used in inner loops."""
    a, b, c, d = _blocks(case, state)
    if d.size == 0:
        return a
    return a - b @ np.linalg.solve(d, c)


def eigenvalues(j) -> np.ndarray:
    return np.linalg.eigvals(np.asarray(j, dtype=float))
