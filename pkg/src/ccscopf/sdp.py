"""Block semidefinite programs in dual form and a primal-dual interior-point solver.

Dual:    maximize  b'y   s.t.  Z_k = C_k - sum_i y_i A_ik  >= 0   (every block k)
Primal:  minimize  sum_k <C_k, X_k>   s.t.  sum_k <A_ik, X_k> = b_i,  X_k >= 0

Problems expose the operator ``apply`` (X -> A(X)), its adjoint, and the Schur
complement M_ij = sum_k tr(A_ik X_k A_jk Z_k^{-1}); the solver never needs the
A_ik explicitly.  The search direction is HKM with a Mehrotra
predictor-corrector step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import _core

# degenerate optima stall around this score; still far below anything physical
ACCEPT_LOOSE = 1e-6
STALL_ITERS = 3


class SolverFailure(RuntimeError):
    def __init__(self, msg: str, status: str = "failed"):
        super().__init__(msg)
        self.status = status


@dataclass
class SdpSolution:
    y: np.ndarray
    x: list  # primal blocks (the dual matrices of the LMIs)
    z: list  # slack blocks
    status: str
    iterations: int
    primal_obj: float
    dual_obj: float
    rel_gap: float
    pinf: float
    dinf: float
    info: dict = field(default_factory=dict)


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


# orthonormal coordinates on symmetric matrices, upper triangle row-major
_SVEC_CACHE: dict = {}


def svec_index(n: int):
    got = _SVEC_CACHE.get(n)
    if got is None:
        iu, ju = np.triu_indices(n)
        w = np.where(iu == ju, 1.0, math.sqrt(2.0))
        got = (iu, ju, w)
        _SVEC_CACHE[n] = got
    return got


def svec(s: np.ndarray) -> np.ndarray:
    iu, ju, w = svec_index(s.shape[0])
    return s[iu, ju] * w


def smat(v: np.ndarray, n: int) -> np.ndarray:
    iu, ju, w = svec_index(n)
    out = np.zeros((n, n))
    out[iu, ju] = v / w
    out[ju, iu] = v / w
    return out


class BlockSdp:
    """Interface; subclasses fill in the operator pieces."""

    block_sizes: tuple
    b: np.ndarray
    c: list

    def apply(self, xs) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def adjoint(self, y) -> list:  # pragma: no cover - interface
        raise NotImplementedError

    def schur(self, xs, zinvs) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def initial_point(self):
        return None

    def dense_blocks(self) -> list:  # pragma: no cover - interface
        raise NotImplementedError


class DenseSdp(BlockSdp):
    """Generic problem with explicit constraint matrices ``a[k]`` of shape (m, n_k, n_k)."""

    def __init__(self, c, a, b):
        self.c = [np.asarray(ck, dtype=float) for ck in c]
        self.a = [np.asarray(ak, dtype=float) for ak in a]
        self.b = np.asarray(b, dtype=float)
        self.block_sizes = tuple(ck.shape[0] for ck in self.c)

    def apply(self, xs):
        return sum(np.einsum("mij,ij->m", ak, xk) for ak, xk in zip(self.a, xs))

    def adjoint(self, y):
        return [np.tensordot(y, ak, axes=1) for ak in self.a]

    def schur(self, xs, zinvs):
        m = len(self.b)
        out = np.zeros((m, m))
        for ak, xk, zk in zip(self.a, xs, zinvs):
            t = xk @ ak @ zk
            out += np.einsum("ikl,jkl->ij", ak, t)
        return sym(out)

    def dense_blocks(self):
        return self.a


class LyapunovIndexSdp(BlockSdp):
    """min eta  s.t.  eta I - J'Phi - Phi J >= 0,  Phi - eps I >= 0,  I - Phi >= 0.

    Variables y = (svec(Phi), eta), objective b'y = -eta.
    """

    def __init__(self, j: np.ndarray, eps: float):
        j = np.ascontiguousarray(j, dtype=float)
        if j.ndim != 2 or j.shape[0] != j.shape[1]:
            raise ValueError("J must be square")
        self.j = j
        self.eps = float(eps)
        n = j.shape[0]
        self.n = n
        self.nphi = n * (n + 1) // 2
        self.block_sizes = (n, n, n)
        self.b = np.zeros(self.nphi + 1)
        self.b[-1] = -1.0
        eye = np.eye(n)
        self.c = [np.zeros((n, n)), -self.eps * eye, eye]

    def apply(self, xs):
        x1, x2, x3 = (sym(x) for x in xs)
        jx = self.j @ x1
        out = np.empty(self.nphi + 1)
        out[:-1] = svec(jx + jx.T - x2 + x3)
        out[-1] = -np.trace(x1)
        return out

    def adjoint(self, y):
        phi = smat(y[:-1], self.n)
        pj = phi @ self.j
        return [pj + pj.T - y[-1] * np.eye(self.n), -phi, phi]

    def schur(self, xs, zinvs):
        j = self.j
        x1, x2, x3 = xs
        z1, z2, z3 = zinvs
        jt = j.T
        jz = j @ z1
        jx = j @ x1
        arows = np.ascontiguousarray(np.stack([z1, z1 @ jt, jz, jz @ jt, z2, z3]))
        brows = np.ascontiguousarray(np.stack([jx @ jt, jx, x1 @ jt, x1, x2, x3]))
        iu, ju, w = svec_index(self.n)
        m = np.empty((self.nphi + 1, self.nphi + 1))
        # each basis pair enters four times for off-diagonal and twice per swap on the diagonal
        kw = np.where(iu == ju, 0.5, 1.0 / math.sqrt(2.0))
        m[:-1, :-1] = _core.lyapunov_schur(arows, brows, kw)
        wz = x1 @ z1
        col = -svec(sym(j @ wz + wz @ jt))
        m[:-1, -1] = col
        m[-1, :-1] = col
        m[-1, -1] = np.trace(wz)
        return m

    def initial_point(self):
        n, eps, j = self.n, self.eps, self.j
        eye = np.eye(n)
        phi = 0.5 * (1.0 + eps) * eye
        s = j.T @ phi + phi @ j
        eta = float(np.max(np.linalg.eigvalsh(sym(s)))) + max(1.0, float(np.max(np.abs(j))) * 0.1)
        y = np.concatenate([svec(phi), [eta]])
        x1 = eye / n
        sx = sym(j @ x1 + x1 @ j.T)
        lam, vec = np.linalg.eigh(sx)
        pos = (vec * np.maximum(lam, 0.0)) @ vec.T
        neg = (vec * np.maximum(-lam, 0.0)) @ vec.T
        t = max(1.0 / n, float(np.max(np.abs(lam))))
        x2 = pos + t * eye
        x3 = neg + t * eye
        zs = [cz - az for cz, az in zip(self.c, self.adjoint(y))]
        return [x1, x2, x3], y, zs

    def dense_blocks(self):
        n = self.n
        iu, ju, w = svec_index(n)
        m = self.nphi + 1
        a1 = np.zeros((m, n, n))
        a2 = np.zeros((m, n, n))
        a3 = np.zeros((m, n, n))
        for k, (p, q) in enumerate(zip(iu, ju)):
            e = np.zeros((n, n))
            e[p, q] = e[q, p] = 1.0 / w[k]
            a1[k] = self.j.T @ e + e @ self.j
            a2[k] = -e
            a3[k] = e
        a1[-1] = -np.eye(n)
        return [a1, a2, a3]


# ------------------------------------------------------------------ solver


def _bsym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _bdot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b))


def _bt(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _max_step(l_inv: np.ndarray, d: np.ndarray) -> float:
    """Largest t with M + t dM PSD for all blocks, given the inverse Cholesky factors of M."""
    w = _bsym(l_inv @ d @ _bt(l_inv))
    lam = float(np.min(np.linalg.eigvalsh(w)[:, 0]))
    return math.inf if lam >= 0 else -1.0 / lam


def _as_stack(blocks) -> np.ndarray:
    return np.ascontiguousarray(np.stack([np.asarray(b, dtype=float) for b in blocks]))


def solve_sdp(problem: BlockSdp, tol: float = 1e-8, max_iter: int = 100, init=None) -> SdpSolution:
    """Infeasible-start primal-dual path following (HKM direction, Mehrotra corrector).

    Blocks must share one size; they are handled as an (k, n, n) stack so every
    factorization is batched.  The best iterate seen is returned; if it never
    reaches ``tol`` but scores below ``ACCEPT_LOOSE`` it is labelled
    ``optimal_inaccurate``.
    """
    sizes = set(problem.block_sizes)
    if len(sizes) != 1:
        raise ValueError("solve_sdp needs equally sized blocks; use an adapter backend otherwise")
    nb = sizes.pop()
    start = init if init is not None else problem.initial_point()
    if start is None:
        k = len(problem.block_sizes)
        xs = np.tile(np.eye(nb), (k, 1, 1))
        zs = xs.copy()
        y = np.zeros(len(problem.b))
    else:
        xs, y, zs = _as_stack(start[0]), np.array(start[1], dtype=float), _as_stack(start[2])
    b = problem.b
    cs = _as_stack(problem.c)
    eye = np.eye(nb)
    ntot = nb * len(cs)
    bnorm = 1.0 + float(np.linalg.norm(b))
    cnorm = 1.0 + float(np.linalg.norm(cs))

    status = "max_iter"
    best = None
    it = 0
    for it in range(max_iter + 1):
        pobj = _bdot(cs, xs)
        dobj = float(b @ y)
        gap = _bdot(xs, zs)
        rp = b - problem.apply(xs)
        rd = cs - zs - _as_stack(problem.adjoint(y))
        pinf = float(np.linalg.norm(rp)) / bnorm
        dinf = float(np.linalg.norm(rd)) / cnorm
        rel_gap = max(abs(pobj - dobj), gap) / (1.0 + abs(pobj) + abs(dobj))
        score = max(rel_gap, pinf, dinf)
        if best is None or score < best[0]:
            best = (score, it, xs, y, zs, pobj, dobj, rel_gap, pinf, dinf)
        if score <= tol:
            status = "optimal"
            break
        if it == max_iter:
            break
        if it - best[1] >= STALL_ITERS:
            status = "stalled"
            break
        mu = gap / ntot

        try:
            lz = np.linalg.cholesky(zs)
            lx = np.linalg.cholesky(xs)
        except np.linalg.LinAlgError:
            status = "stalled"
            break
        lz_inv = np.linalg.solve(lz, eye)
        lx_inv = np.linalg.solve(lx, eye)
        zinv = _bt(lz_inv) @ lz_inv
        mmat = problem.schur(xs, zinv)
        try:
            mfac = sla.cho_factor(mmat, lower=True, check_finite=False)
            msolve = lambda r: sla.cho_solve(mfac, r, check_finite=False)  # noqa: E731
        except (np.linalg.LinAlgError, sla.LinAlgError):
            # rounding can make the Schur complement indefinite near the optimum
            lu = sla.lu_factor(mmat, check_finite=False)
            msolve = lambda r: sla.lu_solve(lu, r, check_finite=False)  # noqa: E731

        base_rhs = rp + problem.apply(xs @ rd @ zinv)

        def direction(h):
            dy = msolve(base_rhs - problem.apply(h))
            dz = rd - _as_stack(problem.adjoint(dy))
            dx = _bsym(h - xs @ dz @ zinv)
            return dx, dy, dz

        # predictor
        dxa, dya, dza = direction(-xs)
        ap = min(1.0, _max_step(lx_inv, dxa))
        ad = min(1.0, _max_step(lz_inv, dza))
        mu_aff = _bdot(xs + ap * dxa, zs + ad * dza) / ntot
        expo = max(1.0, 3.0 * min(ap, ad) ** 2)
        sigma = min(1.0, max(0.0, mu_aff / mu)) ** expo if mu > 0 else 0.0

        # corrector
        dx, dy, dz = direction(sigma * mu * zinv - xs - dxa @ dza @ zinv)
        ap = _max_step(lx_inv, dx)
        ad = _max_step(lz_inv, dz)
        gamma = 0.9 + 0.09 * min(1.0, ap, ad)
        ap = min(1.0, gamma * ap)
        ad = min(1.0, gamma * ad)
        if ap < 1e-12 and ad < 1e-12:
            status = "stalled"
            break
        xs = xs + ap * dx
        y = y + ad * dy
        zs = zs + ad * dz

    score, it_b, xs_b, y_b, zs_b, pobj, dobj, rel_gap, pinf, dinf = best
    if status != "optimal":
        if score <= max(tol, ACCEPT_LOOSE):
            status = "optimal_inaccurate"
        else:
            raise SolverFailure(f"SDP solver {status} at relative score {score:.2e}", status)
    return SdpSolution(
        y_b, list(xs_b), list(zs_b), status, it_b, pobj, dobj, rel_gap, pinf, dinf, {"backend": "ipm"}
    )


def _summary(problem: BlockSdp, y, xs, zs, status, iterations, pinf, dinf, backend) -> SdpSolution:
    pobj = sum(float(np.vdot(c, x)) for c, x in zip(problem.c, xs))
    dobj = float(problem.b @ y)
    return SdpSolution(
        y, xs, zs, status, iterations, pobj, dobj,
        abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj)), pinf, dinf, {"backend": backend},
    )


def solve_sdp_cvxopt(problem: BlockSdp, tol: float = 1e-9, max_iter: int = 100) -> SdpSolution:
    """Same program through cvxopt's conic solver (cross-check backend)."""
    import cvxopt
    from cvxopt import solvers

    blocks = problem.dense_blocks()
    m = len(problem.b)
    gs = [cvxopt.matrix(ak.reshape(m, -1).T.copy()) for ak in blocks]
    hs = [cvxopt.matrix(np.asarray(ck, dtype=float)) for ck in problem.c]
    opts = {"show_progress": False, "abstol": tol, "reltol": tol, "feastol": tol, "maxiters": max_iter}
    try:
        res = solvers.sdp(cvxopt.matrix(-problem.b), Gs=gs, hs=hs, options=opts)
    except (ArithmeticError, ValueError) as exc:
        raise SolverFailure(f"cvxopt failed: {exc}") from exc
    if res["x"] is None:
        raise SolverFailure(f"cvxopt returned status {res['status']}", res["status"])
    y = np.array(res["x"]).ravel()
    xs = [sym(np.array(zk)) for zk in res["zs"]]
    zs = [sym(np.array(sk)) for sk in res["ss"]]
    status = "optimal" if res["status"] == "optimal" else "optimal_inaccurate"
    return _summary(
        problem, y, xs, zs, status, int(res["iterations"]),
        float(res["primal infeasibility"] or 0.0), float(res["dual infeasibility"] or 0.0), "cvxopt",
    )


def _triangle_index(n: int):
    """Upper triangle in column-major order with sqrt(2) on off-diagonals (Clarabel's PSD layout)."""
    cols, rows = np.triu_indices(n)  # lower-triangle row-major == upper-triangle column-major
    rows, cols = cols, rows
    order = np.lexsort((rows, cols))
    rows, cols = rows[order], cols[order]
    w = np.where(rows == cols, 1.0, math.sqrt(2.0))
    return rows, cols, w


def solve_sdp_clarabel(problem: BlockSdp, tol: float = 1e-10, max_iter: int = 200) -> SdpSolution:
    """High-accuracy backend through Clarabel; used where finite differences of eta are taken."""
    import clarabel
    import scipy.sparse as sp

    m = len(problem.b)
    rows_a, rhs, cones, layout = [], [], [], []
    for ak, ck in zip(problem.dense_blocks(), problem.c):
        nb = ck.shape[0]
        r, c, w = _triangle_index(nb)
        rows_a.append(ak[:, r, c].T * w[:, None])
        rhs.append(np.asarray(ck)[r, c] * w)
        cones.append(clarabel.PSDTriangleConeT(nb))
        layout.append((nb, r, c, w))
    amat = sp.csc_matrix(np.vstack(rows_a))
    bvec = np.concatenate(rhs)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    settings.tol_ktratio = max(tol, 1e-10)
    solver = clarabel.DefaultSolver(sp.csc_matrix((m, m)), -np.asarray(problem.b), amat, bvec, cones, settings)
    sol = solver.solve()
    name = str(sol.status).split(".")[-1]
    if name not in ("Solved", "AlmostSolved"):
        raise SolverFailure(f"clarabel returned status {name}", name)
    y = np.asarray(sol.x, dtype=float)
    dual = np.asarray(sol.z, dtype=float)
    slack = np.asarray(sol.s, dtype=float)
    xs, zs = [], []
    off = 0
    for nb, r, c, w in layout:
        k = len(r)
        for vec, out in ((dual, xs), (slack, zs)):
            mat = np.zeros((nb, nb))
            mat[r, c] = vec[off : off + k] / w
            mat[c, r] = vec[off : off + k] / w
            out.append(mat)
        off += k
    pinf = float(np.linalg.norm(problem.b - problem.apply(xs))) / (1.0 + float(np.linalg.norm(problem.b)))
    status = "optimal" if name == "Solved" else "optimal_inaccurate"
    return _summary(problem, y, xs, zs, status, int(sol.iterations), pinf, 0.0, "clarabel")


BACKENDS = {"ipm": solve_sdp, "clarabel": solve_sdp_clarabel, "cvxopt": solve_sdp_cvxopt}
