"""Compiled kernels against the NumPy reference, and both against scan oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affex import kernels
from affex.kernels import _pure

BACKENDS = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])


def _lstm_inputs(rng, B, T, D, H, scale=1.0):
    return (
        rng.standard_normal((B, T, D)) * scale,
        rng.standard_normal((D, 4 * H)),
        rng.standard_normal((H, 4 * H)),
        rng.standard_normal(4 * H),
    )


def _stat_oracle(M):
    B, s, K = M.shape
    out = np.empty((B, 3 * K))
    for n in range(B):
        for k in range(K):
            total, hi, lo = 0.0, M[n, 0, k], M[n, 0, k]
            for r in range(s):
                v = M[n, r, k]
                total += v
                hi = v if v > hi else hi
                lo = v if v < lo else lo
            out[n, k], out[n, K + k], out[n, 2 * K + k] = total / s, hi, lo
    return out


def test_backend_name():
    assert kernels.BACKEND in ("cython", "numpy")
    assert kernels.get_backend("numpy") is _pure
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@pytest.mark.parametrize("backend", BACKENDS)
def test_lstm_step_by_step(backend, rng):
    """The sequence kernel equals repeated single-cell updates."""
    k = kernels.get_backend(backend)
    X, Wx, Wh, b = _lstm_inputs(rng, 2, 5, 3, 4)
    Hs, gates, Cs = k.lstm_seq_forward(X, Wx, Wh, b)
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    for n in range(2):
        h = c = np.zeros(4)
        for t in range(5):
            z = X[n, t] @ Wx + h @ Wh + b
            i, f, g, o = sig(z[:4]), sig(z[4:8]), np.tanh(z[8:12]), sig(z[12:])
            c = f * c + i * g
            h = o * np.tanh(c)
            np.testing.assert_allclose(Hs[n, t], h, atol=1e-14)
            np.testing.assert_allclose(Cs[n, t], c, atol=1e-14)
            np.testing.assert_allclose(gates[n, t], np.concatenate([i, f, g, o]), atol=1e-14)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
@pytest.mark.parametrize("shape", [(1, 1, 1, 1), (3, 7, 2, 5), (32, 16, 7, 32), (2, 3, 40, 8)])
def test_lstm_backends_agree(shape, rng):
    X, Wx, Wh, b = _lstm_inputs(rng, *shape)
    dH = rng.standard_normal(shape[:2] + (shape[3],))
    ext = kernels.get_backend("cython")
    fa = ext.lstm_seq_forward(X, Wx, Wh, b)
    fp = _pure.lstm_seq_forward(X, Wx, Wh, b)
    ga = ext.lstm_seq_backward(dH, X, Wx, Wh, *fa)
    gp = _pure.lstm_seq_backward(dH, X, Wx, Wh, *fp)
    for a, p in zip(fa + ga, fp + gp):
        np.testing.assert_allclose(a, p, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_lstm_saturated_inputs_finite(backend, rng):
    X, Wx, Wh, b = _lstm_inputs(rng, 2, 4, 3, 2, scale=1e4)
    out = kernels.get_backend(backend).lstm_seq_forward(X, Wx, Wh, b)
    assert all(np.isfinite(a).all() for a in out)
    assert np.all(np.abs(out[0]) <= 1)


@pytest.mark.parametrize("backend", BACKENDS)
def test_stat_pool_matches_scan_oracle(backend, rng):
    k = kernels.get_backend(backend)
    for _ in range(50):
        M = rng.standard_normal((3, int(rng.integers(1, 20)), 15))
        out, _, _ = k.stat_pool_forward(M)
        np.testing.assert_array_equal(out, _stat_oracle(M))


@pytest.mark.parametrize("backend", BACKENDS)
def test_stat_pool_ties_route_to_first_row(backend):
    M = np.array([[[1.0, 2.0], [1.0, 0.0], [0.0, 2.0]]])
    out, amax, amin = kernels.get_backend(backend).stat_pool_forward(M)
    np.testing.assert_array_equal(amax, [[0, 0]])
    np.testing.assert_array_equal(amin, [[2, 1]])
    dM = kernels.get_backend(backend).stat_pool_backward(np.ones((1, 6)), amax, amin, 3)
    np.testing.assert_allclose(dM.sum(axis=1), [[3.0, 3.0]])
    np.testing.assert_allclose(dM[0, 0], [1 / 3 + 1, 1 / 3 + 1])


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")
@settings(max_examples=50, deadline=None)
@given(B=st.integers(1, 4), s=st.integers(1, 9), K=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_stat_pool_backends_bit_equal(B, s, K, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((B, s, K))
    ext = kernels.get_backend("cython")
    fa, fp = ext.stat_pool_forward(M), _pure.stat_pool_forward(M)
    for a, p in zip(fa, fp):
        np.testing.assert_array_equal(a, p)
    dout = rng.standard_normal((B, 3 * K))
    np.testing.assert_allclose(
        ext.stat_pool_backward(dout, fa[1], fa[2], s), _pure.stat_pool_backward(dout, fp[1], fp[2], s), atol=1e-15
    )


def test_wrappers_accept_noncontiguous(rng):
    X, Wx, Wh, b = _lstm_inputs(rng, 3, 4, 2, 3)
    Xt = np.asfortranarray(X)
    a = kernels.lstm_seq_forward(Xt, Wx, Wh, b)
    p = _pure.lstm_seq_forward(X, Wx, Wh, b)
    np.testing.assert_allclose(a[0], p[0], atol=1e-13)
