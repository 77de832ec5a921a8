# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched LSTM kernels.

Same contract as ``_lstm_fallback``. The recurrent matmuls call BLAS dgemm
directly and the gate/cell arithmetic runs in typed loops; the backward
pass, which has no transcendental functions, is fully fused.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def forward_batch(Wh, Wx, b, xs, h0, c0):
    cdef Py_ssize_t T = xs.shape[0], B = xs.shape[1]
    cdef int H = Wh.shape[1]
    cdef int G = 4 * H
    cdef double[:, ::1] wh = np.ascontiguousarray(Wh, dtype=np.float64)
    zx_arr = np.ascontiguousarray(
        (np.asarray(xs).reshape(T * B, -1) @ np.asarray(Wx).T + b).reshape(T, B, G))
    hs_arr = np.empty((T + 1, B, H))
    cs_arr = np.empty((T + 1, B, H))
    tcs_arr = np.empty((T, B, H))
    hs_arr[0] = h0
    cs_arr[0] = c0
    # sigmoid(z) = (1 + tanh(z / 2)) / 2: gate activations are one vectorized tanh
    # per step (scalar libm exp/tanh is several times slower than numpy's SIMD tanh)
    half = np.r_[np.full(3 * H, 0.5), np.ones(H)]
    cdef double[:, :, ::1] z = zx_arr
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] cs = cs_arr
    cdef double[:, :, ::1] tcs = tcs_arr
    cdef Py_ssize_t t, n, k
    cdef int m_ = G, n_ = <int>B, k_ = H, lda = H, ldb = H, ldc = G
    cdef double one = 1.0
    cdef double f, i, g
    for t in range(T):
        # z[t] += hs[t] @ Wh.T, in column-major terms z^T = Wh . hs^T
        if B > 0 and H > 0:
            dgemm(b"T", b"N", &m_, &n_, &k_, &one, &wh[0, 0], &lda,
                  &hs[t, 0, 0], &ldb, &one, &z[t, 0, 0], &ldc)
        zt = zx_arr[t]
        np.multiply(zt, half, out=zt)
        np.tanh(zt, out=zt)
        with nogil:
            for n in range(B):
                for k in range(3 * H):
                    z[t, n, k] = 0.5 + 0.5 * z[t, n, k]
                for k in range(H):
                    f = z[t, n, k]
                    i = z[t, n, H + k]
                    g = z[t, n, 3 * H + k]
                    cs[t + 1, n, k] = f * cs[t, n, k] + i * g
        np.tanh(cs_arr[t + 1], out=tcs_arr[t])
        with nogil:
            for n in range(B):
                for k in range(H):
                    hs[t + 1, n, k] = z[t, n, 2 * H + k] * tcs[t, n, k]
    return hs_arr, cs_arr, zx_arr, tcs_arr


def backward_batch(Wh, Wx, xs, hs, cs, gates, tcs, dhs, dh_T, dc_T):
    cdef Py_ssize_t T = xs.shape[0], B = xs.shape[1]
    cdef int H = Wh.shape[1]
    cdef int G = 4 * H
    cdef double[:, ::1] wh = np.ascontiguousarray(Wh, dtype=np.float64)
    cdef double[:, :, ::1] cs_v = np.ascontiguousarray(cs, dtype=np.float64)
    cdef double[:, :, ::1] gv = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, :, ::1] tcv = np.ascontiguousarray(tcs, dtype=np.float64)
    cdef bint has_dhs = dhs is not None
    cdef double[:, :, ::1] dhs_v
    if has_dhs:
        dhs_v = np.ascontiguousarray(dhs, dtype=np.float64)
    dZ_arr = np.empty((T, B, G))
    dh_arr = np.array(dh_T, dtype=np.float64, order="C")
    dc_arr = np.array(dc_T, dtype=np.float64, order="C")
    cdef double[:, :, ::1] dZ = dZ_arr
    cdef double[:, ::1] dh = dh_arr
    cdef double[:, ::1] dc = dc_arr
    cdef Py_ssize_t t, n, k
    cdef int m_ = H, n_ = <int>B, k_ = G, lda = H, ldb = G, ldc = H
    cdef double one = 1.0, zero = 0.0
    cdef double f, i, o, g, tc, dhk, dck
    with nogil:
        for t in range(T - 1, -1, -1):
            for n in range(B):
                for k in range(H):
                    dhk = dh[n, k]
                    if has_dhs:
                        dhk = dhk + dhs_v[t, n, k]
                    f = gv[t, n, k]
                    i = gv[t, n, H + k]
                    o = gv[t, n, 2 * H + k]
                    g = gv[t, n, 3 * H + k]
                    tc = tcv[t, n, k]
                    dck = dc[n, k] + dhk * o * (1.0 - tc * tc)
                    dZ[t, n, k] = dck * cs_v[t, n, k] * f * (1.0 - f)
                    dZ[t, n, H + k] = dck * g * i * (1.0 - i)
                    dZ[t, n, 2 * H + k] = dhk * tc * o * (1.0 - o)
                    dZ[t, n, 3 * H + k] = dck * i * (1.0 - g * g)
                    dc[n, k] = dck * f
            # dh = dZ[t] @ Wh, in column-major terms dh^T = Wh^T . dZ^T
            if B > 0 and H > 0:
                dgemm(b"N", b"N", &m_, &n_, &k_, &one, &wh[0, 0], &lda,
                      &dZ[t, 0, 0], &ldb, &zero, &dh[0, 0], &ldc)
    flat = dZ_arr.reshape(T * B, G)
    dWh = flat.T @ np.asarray(hs)[:-1].reshape(T * B, H)
    dWx = flat.T @ np.asarray(xs).reshape(T * B, -1)
    db = flat.sum(axis=0)
    dxs = (flat @ np.asarray(Wx)).reshape(T, B, -1)
    return dWh, dWx, db, dxs, dh_arr, dc_arr
