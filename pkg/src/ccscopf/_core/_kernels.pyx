# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: power injections, their Jacobian, and the Schur
complement of the Lyapunov LMI program."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos

cnp.import_array()


def power_injections(double[:, ::1] g, double[:, ::1] b, double[::1] theta, double[::1] v):
    cdef Py_ssize_t n = theta.shape[0], i, k
    cdef double d, c, s, acc_p, acc_q
    p = np.empty(n)
    q = np.empty(n)
    cdef double[::1] pv = p, qv = q
    for i in range(n):
        acc_p = 0.0
        acc_q = 0.0
        for k in range(n):
            if g[i, k] == 0.0 and b[i, k] == 0.0:
                continue
            d = theta[i] - theta[k]
            c = cos(d)
            s = sin(d)
            acc_p += v[k] * (g[i, k] * c + b[i, k] * s)
            acc_q += v[k] * (g[i, k] * s - b[i, k] * c)
        pv[i] = v[i] * acc_p
        qv[i] = v[i] * acc_q
    return p, q


def injection_jacobian(double[:, ::1] g, double[:, ::1] b, double[::1] theta, double[::1] v):
    cdef Py_ssize_t n = theta.shape[0], i, k
    cdef double d, c, s, gcbs, gsbc, acc_p, acc_q
    a1 = np.zeros((n, n))
    a2 = np.zeros((n, n))
    a3 = np.zeros((n, n))
    a4 = np.zeros((n, n))
    cdef double[:, ::1] dpt = a1, dpv = a2, dqt = a3, dqv = a4
    for i in range(n):
        acc_p = 0.0
        acc_q = 0.0
        for k in range(n):
            if g[i, k] == 0.0 and b[i, k] == 0.0:
                continue
            d = theta[i] - theta[k]
            c = cos(d)
            s = sin(d)
            gcbs = g[i, k] * c + b[i, k] * s
            gsbc = g[i, k] * s - b[i, k] * c
            acc_p += v[k] * gcbs
            acc_q += v[k] * gsbc
            if k != i:
                dpt[i, k] = v[i] * v[k] * gsbc
                dpv[i, k] = v[i] * gcbs
                dqt[i, k] = -v[i] * v[k] * gcbs
                dqv[i, k] = v[i] * gsbc
        acc_p *= v[i]
        acc_q *= v[i]
        dpt[i, i] = -acc_q - b[i, i] * v[i] * v[i]
        dpv[i, i] = acc_p / v[i] + g[i, i] * v[i]
        dqt[i, i] = acc_p - g[i, i] * v[i] * v[i]
        dqv[i, i] = acc_q / v[i] - b[i, i] * v[i]
    return a1, a2, a3, a4


def lyapunov_schur(double[:, :, ::1] arows, double[:, :, ::1] brows, double[::1] weights):
    cdef Py_ssize_t nt = arows.shape[0], n = arows.shape[1]
    cdef Py_ssize_t m = n * (n + 1) // 2
    cdef Py_ssize_t a, bb, t, p, q, r, s
    cdef double acc
    cdef cnp.intp_t[::1] ip = np.empty(m, dtype=np.intp)
    cdef cnp.intp_t[::1] jq = np.empty(m, dtype=np.intp)
    a = 0
    for p in range(n):
        for q in range(p, n):
            ip[a] = p
            jq[a] = q
            a += 1
    out = np.empty((m, m))
    cdef double[:, ::1] mv = out
    for a in range(m):
        p = ip[a]
        q = jq[a]
        for bb in range(a, m):
            r = ip[bb]
            s = jq[bb]
            acc = 0.0
            for t in range(nt):
                acc += (arows[t, q, s] * brows[t, p, r] + arows[t, p, s] * brows[t, q, r]
                        + arows[t, q, r] * brows[t, p, s] + arows[t, p, r] * brows[t, q, s])
            acc *= weights[a] * weights[bb]
            mv[a, bb] = acc
            mv[bb, a] = acc
    return out
