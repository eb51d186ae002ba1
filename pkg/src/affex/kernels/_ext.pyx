# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence and STAT pooling kernels.

Same signatures and results (up to floating-point rounding) as
``affex.kernels._pure``.  The recurrences run as compiled loops that call
BLAS ``dgemm`` once per time step for the whole batch; products with no
time dependence go to BLAS through NumPy.  All arrays must be C-contiguous float64; the
argmax/argmin arrays are int64.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _sigmoid(double z) noexcept nogil:
    # exp is several times cheaper than libc tanh; exp(-z) = inf gives 0
    return 1.0 / (1.0 + exp(-z))


cdef inline double _tanh(double z) noexcept nogil:
    return 2.0 * _sigmoid(2.0 * z) - 1.0


cdef inline void _rowmajor_gemm(bint trans_b, int m, int n, int k, const double* A, int lda,
                                const double* Bm, int ldb, double beta, double* C, int ldc) noexcept nogil:
    # row-major C[m, n] = A[m, k] @ op(B) + beta * C, via column-major BLAS on the transposes
    cdef char transa = b"T" if trans_b else b"N"
    cdef char transb = b"N"
    cdef double alpha = 1.0
    dgemm(&transa, &transb, &n, &m, &k, &alpha, <double*>Bm, &ldb, <double*>A, &lda, &beta, C, &ldc)


def lstm_seq_forward(const double[:, :, ::1] X, const double[:, ::1] Wx,
                     const double[:, ::1] Wh, const double[::1] b):
    cdef int B = X.shape[0], T = X.shape[1]
    cdef int H = Wh.shape[0], G = 4 * Wh.shape[0]
    # the input projection has no recurrence: one BLAS call for every step
    gates_arr = np.ascontiguousarray(np.asarray(X) @ np.asarray(Wx) + np.asarray(b))
    Hs_arr = np.empty((B, T, H))
    Cs_arr = np.empty((B, T, H))
    cdef double[:, :, ::1] Hs = Hs_arr
    cdef double[:, :, ::1] Cs = Cs_arr
    cdef double[:, :, ::1] z = gates_arr
    cdef int n, t, k
    cdef double c_prev, i, f, g, o, c
    with nogil:
        for t in range(T):
            if t > 0:
                # z[:, t] += Hs[:, t - 1] @ Wh, rows strided through the batch
                _rowmajor_gemm(False, B, G, H, &Hs[0, t - 1, 0], T * H, &Wh[0, 0], G, 1.0, &z[0, t, 0], T * G)
            for n in range(B):
                for k in range(H):
                    i = _sigmoid(z[n, t, k])
                    f = _sigmoid(z[n, t, H + k])
                    g = _tanh(z[n, t, 2 * H + k])
                    o = _sigmoid(z[n, t, 3 * H + k])
                    c_prev = Cs[n, t - 1, k] if t > 0 else 0.0
                    c = f * c_prev + i * g
                    Cs[n, t, k] = c
                    Hs[n, t, k] = o * _tanh(c)
                    # pre-activations are overwritten with gate values in place
                    z[n, t, k] = i
                    z[n, t, H + k] = f
                    z[n, t, 2 * H + k] = g
                    z[n, t, 3 * H + k] = o
    return Hs_arr, gates_arr, Cs_arr


def lstm_seq_backward(const double[:, :, ::1] dHs, const double[:, :, ::1] X,
                      const double[:, ::1] Wx, const double[:, ::1] Wh,
                      const double[:, :, ::1] Hs, const double[:, :, ::1] gates,
                      const double[:, :, ::1] Cs):
    cdef int B = X.shape[0], T = X.shape[1], D = X.shape[2]
    cdef int H = Wh.shape[0], G = 4 * Wh.shape[0]
    dZ_arr = np.empty((B, T, G))
    state = np.zeros((2, B, H))
    tC_arr = np.tanh(np.asarray(Cs))
    cdef double[:, :, ::1] dZ = dZ_arr
    cdef double[:, :, ::1] tC = tC_arr
    cdef double[:, ::1] dh_next = state[0]
    cdef double[:, ::1] dc_next = state[1]
    cdef int n, t, k
    cdef double i, f, g, o, tc, c_prev, dh, dc
    with nogil:
        for t in range(T - 1, -1, -1):
            for n in range(B):
                for k in range(H):
                    i = gates[n, t, k]
                    f = gates[n, t, H + k]
                    g = gates[n, t, 2 * H + k]
                    o = gates[n, t, 3 * H + k]
                    tc = tC[n, t, k]
                    c_prev = Cs[n, t - 1, k] if t > 0 else 0.0
                    dh = dHs[n, t, k] + dh_next[n, k]
                    dc = dc_next[n, k] + dh * o * (1.0 - tc * tc)
                    dZ[n, t, k] = dc * g * i * (1.0 - i)
                    dZ[n, t, H + k] = dc * c_prev * f * (1.0 - f)
                    dZ[n, t, 2 * H + k] = dc * i * (1.0 - g * g)
                    dZ[n, t, 3 * H + k] = dh * tc * o * (1.0 - o)
                    dc_next[n, k] = dc * f
            if t > 0:
                # dh_next = dZ[:, t] @ Wh.T
                _rowmajor_gemm(True, B, H, G, &dZ[0, t, 0], T * G, &Wh[0, 0], G, 0.0, &dh_next[0, 0], H)
    # parameter and input gradients are plain products over all steps
    Hprev = np.concatenate([np.zeros((B, 1, H)), np.asarray(Hs)[:, :-1]], axis=1)
    flat = dZ_arr.reshape(B * T, G)
    dX = dZ_arr @ np.asarray(Wx).T
    dWx = np.asarray(X).reshape(B * T, D).T @ flat
    dWh = Hprev.reshape(B * T, H).T @ flat
    db = flat.sum(axis=0)
    return dX, dWx, dWh, db


def stat_pool_forward(const double[:, :, ::1] M):
    cdef Py_ssize_t B = M.shape[0], S = M.shape[1], K = M.shape[2]
    out_arr = np.empty((B, 3 * K))
    amax_arr = np.zeros((B, K), dtype=np.int64)
    amin_arr = np.zeros((B, K), dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef cnp.int64_t[:, ::1] amax = amax_arr
    cdef cnp.int64_t[:, ::1] amin = amin_arr
    cdef Py_ssize_t n, r, k
    cdef double v, hi, lo, total
    with nogil:
        for n in range(B):
            for k in range(K):
                hi = M[n, 0, k]
                lo = hi
                total = 0.0
                for r in range(S):
                    v = M[n, r, k]
                    total = total + v
                    if v > hi:
                        hi = v
                        amax[n, k] = r
                    if v < lo:
                        lo = v
                        amin[n, k] = r
                out[n, k] = total / S
                out[n, K + k] = hi
                out[n, 2 * K + k] = lo
    return out_arr, amax_arr, amin_arr


def stat_pool_backward(const double[:, ::1] dout, const cnp.int64_t[:, ::1] amax,
                       const cnp.int64_t[:, ::1] amin, Py_ssize_t s):
    cdef Py_ssize_t B = dout.shape[0], K = dout.shape[1] // 3
    dM_arr = np.empty((B, s, K))
    cdef double[:, :, ::1] dM = dM_arr
    cdef Py_ssize_t n, r, k
    cdef double share
    with nogil:
        for n in range(B):
            for k in range(K):
                share = dout[n, k] / s
                for r in range(s):
                    dM[n, r, k] = share
                dM[n, amax[n, k], k] += dout[n, K + k]
                dM[n, amin[n, k], k] += dout[n, 2 * K + k]
    return dM_arr
