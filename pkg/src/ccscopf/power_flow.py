"""Steady state of the droop DAE: a Newton solve over angles, voltages and the shared frequency."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _core
from .case_model import MicrogridCase

TOL = 1e-8
MAX_ITER = 50
MAX_HALVINGS = 4


class NonConvergence(RuntimeError):
    def __init__(self, msg: str, residual_norm: float):
        super().__init__(f"{msg} (last residual {residual_norm:.3e})")
        self.residual_norm = residual_norm


class SingularNewtonJacobian(RuntimeError):
    def __init__(self, msg: str, residual_norm: float):
        super().__init__(f"{msg} (last residual {residual_norm:.3e})")
        self.residual_norm = residual_norm


@dataclass
class Equilibrium:
    alpha: np.ndarray  # angles of non-reference buses relative to the reference
    v: np.ndarray
    omega: float
    p_g: np.ndarray
    q_g: np.ndarray
    z: np.ndarray = field(repr=False)
    eps_r: np.ndarray = field(repr=False)
    iterations: int = 0
    residual_norm: float = 0.0

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.v, [self.omega]])

    def theta(self, case: MicrogridCase) -> np.ndarray:
        return _theta(case.network, self.alpha)

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for arr in (self.state, self.z, self.eps_r):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        return h.hexdigest()


def _theta(net, alpha) -> np.ndarray:
    th = np.zeros(net.n)
    th[net.nonref_pos] = alpha
    return th


def _split(case: MicrogridCase, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    g = case.g
    if z.shape != (3 * g,):
        raise ValueError(f"set-point vector must have length {3 * g}, got shape {z.shape}")
    return z[:g], z[g : 2 * g], z[2 * g :]


def _eps(case: MicrogridCase, eps_r) -> np.ndarray:
    if eps_r is None:
        return np.zeros(case.n_res)
    eps = np.asarray(eps_r, dtype=float)
    if eps.shape != (case.n_res,):
        raise ValueError(f"eps_r must have length {case.n_res}, got shape {eps.shape}")
    return eps


def droop_outputs(case: MicrogridCase, z, v_dg, omega) -> tuple[np.ndarray, np.ndarray]:
    """Realized DG outputs implied by the droop laws."""
    net = case.network
    p_set, q_set, v_set = _split(case, z)
    p_g = p_set - (omega - net.omega_set) / net.kp
    q_g = q_set - (v_dg - v_set) / net.kq
    return p_g, q_g


def _residual_vector(case: MicrogridCase, u: np.ndarray, z, eps: np.ndarray) -> np.ndarray:
    net = case.network
    n = net.n
    alpha = u[: n - 1]
    v = u[n - 1 : 2 * n - 1]
    omega = u[2 * n - 1]
    p_inj, q_inj = _core.power_injections(net.g, net.b, _theta(net, alpha), np.ascontiguousarray(v))
    p_res, q_res = net.res_injection(eps)
    p_g, q_g = droop_outputs(case, z, v[net.dg_pos], omega)
    rp = p_res - net.load_p - p_inj
    rq = q_res - net.load_q - q_inj
    rp[net.dg_pos] += p_g
    rq[net.dg_pos] += q_g
    return np.concatenate([rp, rq])


def residuals(case: MicrogridCase, state, z, eps_r=None) -> np.ndarray:
    """Active then reactive balance mismatch at every bus (length 2n).

    ``state`` is an :class:`Equilibrium` or the vector [alpha (n-1), V (n), omega].
    """
    u = state.state if isinstance(state, Equilibrium) else np.asarray(state, dtype=float)
    if u.shape != (2 * case.n,):
        raise ValueError(f"state must have length {2 * case.n}, got shape {u.shape}")
    return _residual_vector(case, u, z, _eps(case, eps_r))


def newton_jacobian(case: MicrogridCase, u: np.ndarray) -> np.ndarray:
    """d(residuals)/d(state) in the solver's unknown ordering."""
    net = case.network
    n = net.n
    alpha = u[: n - 1]
    v = np.ascontiguousarray(u[n - 1 : 2 * n - 1])
    dpt, dpv, dqt, dqv = _core.injection_jacobian(net.g, net.b, _theta(net, alpha), v)
    jac = np.empty((2 * n, 2 * n))
    jac[:n, : n - 1] = -dpt[:, net.nonref_pos]
    jac[:n, n - 1 : 2 * n - 1] = -dpv
    jac[n:, : n - 1] = -dqt[:, net.nonref_pos]
    jac[n:, n - 1 : 2 * n - 1] = -dqv
    jac[:, 2 * n - 1] = 0.0
    jac[net.dg_pos, 2 * n - 1] = -1.0 / net.kp
    jac[n + net.dg_pos, n - 1 + net.dg_pos] -= 1.0 / net.kq
    return jac


def flat_start(case: MicrogridCase) -> np.ndarray:
    n = case.n
    return np.concatenate([np.zeros(n - 1), np.ones(n), [case.omega_set]])


def solve_equilibrium(
    case: MicrogridCase,
    z=None,
    eps_r=None,
    init: Equilibrium | np.ndarray | None = None,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> Equilibrium:
    """Newton iteration with step halving on residual increase.

    ``z`` defaults to the set-points stored in the case; ``eps_r`` to zero
    forecast error; ``init`` to a flat start.
    """
    if z is None:
        z = case.z_default()
    z = np.asarray(z, dtype=float)
    _split(case, z)
    eps = _eps(case, eps_r)
    if init is None:
        u = flat_start(case)
    elif isinstance(init, Equilibrium):
        u = init.state.copy()
    else:
        u = np.array(init, dtype=float)
    n = case.n

    r = _residual_vector(case, u, z, eps)
    norm = float(np.max(np.abs(r)))
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise NonConvergence(f"Newton hit the {max_iter}-iteration cap", norm)
        jac = newton_jacobian(case, u)
        try:
            lu = sla.lu_factor(jac, check_finite=False)
        except (sla.LinAlgError, ValueError) as exc:
            raise SingularNewtonJacobian(str(exc), norm) from exc
        if np.min(np.abs(np.diag(lu[0]))) <= 1e-14 * max(1.0, np.max(np.abs(jac))):
            raise SingularNewtonJacobian("Newton Jacobian is singular", norm)
        step = -sla.lu_solve(lu, r, check_finite=False)
        if not np.all(np.isfinite(step)):
            raise SingularNewtonJacobian("non-finite Newton step", norm)
        scale = 1.0
        for _ in range(MAX_HALVINGS + 1):
            trial = u + scale * step
            if np.all(trial[n - 1 : 2 * n - 1] > 0):
                r_trial = _residual_vector(case, trial, z, eps)
                norm_trial = float(np.max(np.abs(r_trial)))
                if norm_trial < norm:
                    break
            scale *= 0.5
        else:
            if not np.all(trial[n - 1 : 2 * n - 1] > 0):
                raise NonConvergence("Newton step drove a voltage non-positive", norm)
        u, r, norm = trial, r_trial, norm_trial
        it += 1
        if not np.isfinite(norm):
            raise NonConvergence("residual became non-finite", norm)

    alpha = u[: n - 1].copy()
    v = u[n - 1 : 2 * n - 1].copy()
    omega = float(u[-1])
    p_g, q_g = droop_outputs(case, z, v[case.network.dg_pos], omega)
    return Equilibrium(alpha, v, omega, p_g, q_g, z.copy(), eps.copy(), it, norm)
