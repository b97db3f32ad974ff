import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccscopf._core import _fallback, compiled_module
from ccscopf.case_model import build_admittance

compiled = compiled_module()
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def _network(case):
    y = build_admittance(case)
    return np.ascontiguousarray(y.g), np.ascontiguousarray(y.b)


def _state(n, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 0.05, n), 1.0 + rng.normal(0, 0.02, n)


@needs_compiled
def test_injections_match(all_cases):
    for case in all_cases.values():
        g, b = _network(case)
        th, v = _state(case.n, 0)
        for a, c in zip(compiled.power_injections(g, b, th, v), _fallback.power_injections(g, b, th, v)):
            np.testing.assert_allclose(a, c, rtol=0, atol=1e-12)


@needs_compiled
def test_jacobian_matches(all_cases):
    for case in all_cases.values():
        g, b = _network(case)
        th, v = _state(case.n, 1)
        for a, c in zip(compiled.injection_jacobian(g, b, th, v), _fallback.injection_jacobian(g, b, th, v)):
            np.testing.assert_allclose(a, c, rtol=0, atol=1e-11)


def test_fallback_jacobian_is_derivative(case5):
    g, b = _network(case5)
    th, v = _state(case5.n, 2)
    dpt, dpv, dqt, dqv = _fallback.injection_jacobian(g, b, th, v)
    h = 1e-7
    for k in range(case5.n):
        e = np.zeros(case5.n)
        e[k] = h
        pp, qp = _fallback.power_injections(g, b, th + e, v)
        pm, qm = _fallback.power_injections(g, b, th - e, v)
        np.testing.assert_allclose((pp - pm) / (2 * h), dpt[:, k], atol=1e-7)
        np.testing.assert_allclose((qp - qm) / (2 * h), dqt[:, k], atol=1e-7)
        pp, qp = _fallback.power_injections(g, b, th, v + e)
        pm, qm = _fallback.power_injections(g, b, th, v - e)
        np.testing.assert_allclose((pp - pm) / (2 * h), dpv[:, k], atol=1e-7)
        np.testing.assert_allclose((qp - qm) / (2 * h), dqv[:, k], atol=1e-7)


def _schur_reference(arows, brows, w):
    # direct sum over the symmetric basis pairs
    n = arows.shape[1]
    iu, ju = np.triu_indices(n)
    m = np.zeros((iu.size, iu.size))
    for a, (p, q) in enumerate(zip(iu, ju)):
        for c, (r, s) in enumerate(zip(iu, ju)):
            tot = 0.0
            for t in range(arows.shape[0]):
                A, B = arows[t], brows[t]
                tot += A[q, s] * B[p, r] + A[p, s] * B[q, r] + A[q, r] * B[p, s] + A[p, r] * B[q, s]
            m[a, c] = w[a] * w[c] * tot
    return m


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 5), k=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_schur_kernels_match_direct_sum(n, k, seed):
    rng = np.random.default_rng(seed)
    # stacks closed under transposing both factors, as the SDP builds them, give a symmetric result
    a = rng.normal(size=(k, n, n))
    b = rng.normal(size=(k, n, n))
    arows = np.ascontiguousarray(np.concatenate([a, a.transpose(0, 2, 1)]))
    brows = np.ascontiguousarray(np.concatenate([b, b.transpose(0, 2, 1)]))
    w = rng.uniform(0.5, 1.0, n * (n + 1) // 2)
    ref = _schur_reference(arows, brows, w)
    np.testing.assert_allclose(_fallback.lyapunov_schur(arows, brows, w), ref, atol=1e-10)
    if compiled is not None:
        np.testing.assert_allclose(compiled.lyapunov_schur(arows, brows, w), ref, atol=1e-10)


def test_pure_python_switch(monkeypatch):
    import importlib

    import ccscopf._core as core

    monkeypatch.setenv("CCSCOPF_PURE_PYTHON", "1")
    try:
        importlib.reload(core)
        assert core.BACKEND == "python"
        assert core.power_injections is _fallback.power_injections
    finally:
        monkeypatch.delenv("CCSCOPF_PURE_PYTHON")
        importlib.reload(core)
