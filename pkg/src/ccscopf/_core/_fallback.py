"""Pure numpy versions of the hot kernels.

Same signatures and results as the compiled module; selected automatically
when the extension is unavailable.
"""

from __future__ import annotations

import numpy as np


def power_injections(g, b, theta, v):
    d = theta[:, None] - theta[None, :]
    c = np.cos(d)
    s = np.sin(d)
    vv = v[None, :]
    p = v * np.sum(vv * (g * c + b * s), axis=1)
    q = v * np.sum(vv * (g * s - b * c), axis=1)
    return p, q


def injection_jacobian(g, b, theta, v):
    """Partials of (P, Q) injections w.r.t. (theta, V); each block is n x n."""
    d = theta[:, None] - theta[None, :]
    c = np.cos(d)
    s = np.sin(d)
    gc_bs = g * c + b * s
    gs_bc = g * s - b * c
    vv = np.outer(v, v)
    p = v * (gc_bs @ v)
    q = v * (gs_bc @ v)
    gd = np.diagonal(g)
    bd = np.diagonal(b)
    dp_dth = vv * gs_bc
    dp_dv = v[:, None] * gc_bs
    dq_dth = -vv * gc_bs
    dq_dv = v[:, None] * gs_bc
    np.fill_diagonal(dp_dth, -q - bd * v * v)
    np.fill_diagonal(dp_dv, p / v + gd * v)
    np.fill_diagonal(dq_dth, p - gd * v * v)
    np.fill_diagonal(dq_dv, q / v - bd * v)
    return dp_dth, dp_dv, dq_dth, dq_dv


def lyapunov_schur(arows, brows, weights):
    """Schur complement block for the symmetric-matrix variable.

    ``arows``/``brows`` are stacks (k, n, n) of Kronecker factor pairs; entry
    (a, b) for basis pairs a=(p,q), b=(r,s) in upper-triangle order is
    w_a w_b sum_t [A_qs B_pr + A_ps B_qr + A_qr B_ps + A_pr B_qs].
    The stack must be closed under transposing both factors, which makes the
    result symmetric; the compiled kernel only evaluates the upper triangle.
    """
    n = arows.shape[1]
    iu, ju = np.triu_indices(n)
    # K[p, q, r, s] = sum_t A[q, s] B[p, r]
    k = np.einsum("tjl,tik->ijkl", arows, brows, optimize=True)
    ks = k + k.transpose(1, 0, 2, 3)
    ks = ks + ks.transpose(0, 1, 3, 2)
    m = ks[iu, ju][:, iu, ju]
    return m * np.outer(weights, weights)
