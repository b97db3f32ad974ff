"""First-order sensitivities of the stability index, DG outputs and voltages.

Parameters p are the set-points z = [P*, Q*, V*] and the RES forecast errors.
States follow from the steady-state balance R(u, p) = 0:

    S du = (dR/dp) dp,    S = -dR/du

and eta follows from J(u) through d eta/d u_k = <d eta/dJ, dJ/du_k>.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .case_model import MicrogridCase
from .power_flow import Equilibrium, newton_jacobian
from .small_signal import assemble, reduce, reduced_jacobian
from .stability import StabilityResult, _fingerprint, eta_jacobian_sensitivity

COND_LIMIT = 1e12
FD_STEP = 1e-6


class IllConditionedEquilibrium(RuntimeError):
    pass


class AnchorMismatch(ValueError):
    pass


@dataclass
class SMatrix:
    """S in state order [alpha_r; alpha_L; V; omega], rows [P balance; Q balance] by bus.

    ``perm[i]`` is the Newton-unknown index of state column i.
    """

    s: np.ndarray
    perm: np.ndarray
    cond: float
    fingerprint: str
    lu: tuple = field(repr=False, default=None)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.lu_solve(self.lu, rhs, check_finite=False)

    def to_newton_order(self, du: np.ndarray) -> np.ndarray:
        out = np.empty_like(du)
        out[self.perm] = du
        return out


def state_permutation(case: MicrogridCase) -> np.ndarray:
    net = case.network
    n = net.n
    col = {int(p): k for k, p in enumerate(net.nonref_pos)}  # angle unknown index by bus
    alpha_r = [col[int(p)] for p in net.dg_nonref]
    alpha_l = [col[int(p)] for p in net.load_pos if int(p) != net.ref]
    return np.array(alpha_r + alpha_l + list(range(n - 1, 2 * n - 1)) + [2 * n - 1], dtype=np.intp)


def build_s_matrix(case: MicrogridCase, eq: Equilibrium) -> SMatrix:
    perm = state_permutation(case)
    s = -newton_jacobian(case, eq.state)[:, perm]
    lu = sla.lu_factor(s, check_finite=False)
    anorm = float(np.max(np.sum(np.abs(s), axis=0)))
    rc, info = lapack.dgecon(lu[0], anorm, norm="1")
    cond = np.inf if info != 0 or rc == 0 else 1.0 / float(rc)
    if not cond < COND_LIMIT:
        raise IllConditionedEquilibrium(f"S-matrix condition estimate {cond:.2e} exceeds {COND_LIMIT:.0e}")
    return SMatrix(s, perm, float(cond), eq.fingerprint, lu)


@dataclass
class StateSensitivities:
    """Columns are d(state)/d(parameter) in S state order."""

    du_dz: np.ndarray  # (2n, 3g)
    du_dpr: np.ndarray  # (2n, n_res) active RES injection
    du_dqr: np.ndarray  # (2n, n_res) reactive RES injection


def parameter_columns(case: MicrogridCase) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """dR/dp for z, RES active and RES reactive injections (rows [P; Q] by bus)."""
    net = case.network
    n, g, nr = net.n, case.g, case.n_res
    rz = np.zeros((2 * n, 3 * g))
    k = np.arange(g)
    rz[net.dg_pos, k] = 1.0
    rz[n + net.dg_pos, g + k] = 1.0
    # V* enters the reactive droop as (V* - V)/K_q, an equivalent Q* shift of 1/K_q
    rz[n + net.dg_pos, 2 * g + k] = 1.0 / net.kq
    rp = np.zeros((2 * n, nr))
    rq = np.zeros((2 * n, nr))
    rp[net.res_pos, np.arange(nr)] = 1.0
    rq[n + net.res_pos, np.arange(nr)] = 1.0
    return rz, rp, rq


def state_sensitivities(case: MicrogridCase, s: SMatrix) -> StateSensitivities:
    rz, rp, rq = parameter_columns(case)
    sol = s.solve(np.hstack([rz, rp, rq]))
    g3, nr = rz.shape[1], rp.shape[1]
    return StateSensitivities(sol[:, :g3], sol[:, g3 : g3 + nr], sol[:, g3 + nr :])


def jacobian_state_derivatives(case: MicrogridCase, eq: Equilibrium, step: float = FD_STEP) -> np.ndarray:
    """dJ/du_k for every state k in S order, shape (2n, m, m); central differences of the assembly."""
    perm = state_permutation(case)
    u0 = eq.state
    m = 3 * case.g - 1
    out = np.empty((len(perm), m, m))
    omega_col = 2 * case.n - 1
    for i, k in enumerate(perm):
        if k == omega_col:
            out[i] = 0.0  # no block of the linearization depends on the frequency level
            continue
        up = u0.copy()
        dn = u0.copy()
        up[k] += step
        dn[k] -= step
        out[i] = (reduced_jacobian(case, up) - reduced_jacobian(case, dn)) / (2.0 * step)
    return out


@dataclass
class SensitivityBundle:
    eta0: float
    deta_dz: np.ndarray
    deta_dpr: np.ndarray
    deta_dqr: np.ndarray
    deta_deps: np.ndarray  # combined active + ratio * reactive RES column
    dv_dz: np.ndarray  # (n, 3g)
    dpg_dz: np.ndarray  # (g, 3g)
    dqg_dz: np.ndarray
    dv_deps: np.ndarray  # (n, n_res)
    dpg_deps: np.ndarray
    dqg_deps: np.ndarray
    domega_dz: np.ndarray
    domega_deps: np.ndarray
    anchor: Equilibrium = field(repr=False)
    fingerprint: str = ""

    def eta_taylor(self, dz=None, eps=None) -> float:
        val = self.eta0
        if dz is not None:
            val += float(self.deta_dz @ np.asarray(dz, dtype=float))
        if eps is not None:
            val += float(self.deta_deps @ np.asarray(eps, dtype=float))
        return val


def _outputs(case: MicrogridCase, du_dz, du_de):
    """Split state sensitivities into V, omega and droop outputs."""
    net = case.network
    n, g = net.n, case.g
    vrows = slice(n - 1, 2 * n - 1)
    dv_dz, dv_de = du_dz[vrows], du_de[vrows]
    dw_dz, dw_de = du_dz[-1], du_de[-1]
    ez = np.eye(3 * g)
    # P_G = P* - (w - w*)/K_p ;  Q_G = Q* - (V_G - V*)/K_q
    dpg_dz = ez[:g] - dw_dz[None, :] / net.kp[:, None]
    dqg_dz = ez[g : 2 * g] - (dv_dz[net.dg_pos] - ez[2 * g :]) / net.kq[:, None]
    dpg_de = -dw_de[None, :] / net.kp[:, None]
    dqg_de = -dv_de[net.dg_pos] / net.kq[:, None]
    return dv_dz, dv_de, dw_dz, dw_de, dpg_dz, dqg_dz, dpg_de, dqg_de


def eta_state_gradient(djdu: np.ndarray, deta_dj: np.ndarray) -> np.ndarray:
    return np.tensordot(djdu, deta_dj, axes=([1, 2], [0, 1]))


def chain_rule_sensitivities(
    case: MicrogridCase,
    eq: Equilibrium,
    stab: StabilityResult,
    s: SMatrix,
    djdu: np.ndarray | None = None,
) -> SensitivityBundle:
    if s.fingerprint != eq.fingerprint:
        raise AnchorMismatch("S-matrix was built at a different equilibrium")
    j = reduce(assemble(case, eq)).j
    if stab.j_fingerprint and stab.j_fingerprint != _fingerprint(j):
        raise AnchorMismatch("stability result belongs to a different Jacobian")
    deta_dj = stab.deta_dj if stab.deta_dj is not None else eta_jacobian_sensitivity(stab, j)
    if djdu is None:
        djdu = jacobian_state_derivatives(case, eq)
    if djdu.shape != (2 * case.n, j.shape[0], j.shape[0]):
        raise ValueError(f"dJ/du has shape {djdu.shape}, expected {(2 * case.n, *j.shape)}")
    ss = state_sensitivities(case, s)
    gu = eta_state_gradient(djdu, deta_dj)
    net = case.network
    lam = net.res_ratio
    du_de = ss.du_dpr + ss.du_dqr * lam[None, :]
    dv_dz, dv_de, dw_dz, dw_de, dpg_dz, dqg_dz, dpg_de, dqg_de = _outputs(case, ss.du_dz, du_de)
    deta_dpr = gu @ ss.du_dpr
    deta_dqr = gu @ ss.du_dqr
    return SensitivityBundle(
        eta0=stab.eta,
        deta_dz=gu @ ss.du_dz,
        deta_dpr=deta_dpr,
        deta_dqr=deta_dqr,
        deta_deps=deta_dpr + lam * deta_dqr,
        dv_dz=dv_dz,
        dpg_dz=dpg_dz,
        dqg_dz=dqg_dz,
        dv_deps=dv_de,
        dpg_deps=dpg_de,
        dqg_deps=dqg_de,
        domega_dz=dw_dz,
        domega_deps=dw_de,
        anchor=eq,
        fingerprint=eq.fingerprint,
    )
