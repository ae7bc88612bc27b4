# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND = "cython"


def correlate2d(x, w):
    """Valid, stride-1 cross-correlation.

    x: [B, C, H, W], w: [O, C, kh, kw] -> [B, O, H - kh + 1, W - kw + 1]

    Few output channels with a small kernel go through a direct loop. Weight
    gradients (fewer output positions than kernel taps) use a strided view and
    tensordot, where BLAS already wins; everything else goes through im2col
    and one GEMM.
    """
    kh, kw = w.shape[2], w.shape[3]
    if (x.shape[2] - kh + 1) * (x.shape[3] - kw + 1) < kh * kw:
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if w.shape[0] <= 8 and kh * kw <= 49:
        return _correlate2d_direct(x, w)
    return _correlate2d_gemm(x, w)


def _correlate2d_gemm(x, w):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, :, :, ::1] xv = x
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = H - kh + 1, Wo = W - kw + 1
    cdef Py_ssize_t K = C * kh * kw, P = Ho * Wo
    cols_arr = np.empty((K, B * P), dtype=np.float64)
    cdef double[:, ::1] cols = cols_arr
    cdef Py_ssize_t b, c, p, q, i, j, row
    cdef const double* src
    cdef double* dst
    for b in range(B):
        for c in range(C):
            for p in range(kh):
                for q in range(kw):
                    row = (c * kh + p) * kw + q
                    dst = &cols[row, b * P]
                    for i in range(Ho):
                        src = &xv[b, c, i + p, q]
                        for j in range(Wo):
                            dst[i * Wo + j] = src[j]
    out = w.reshape(O, K) @ cols_arr  # [O, B * P]
    return np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))


def apply_1q(double complex[::1] state, int qubit, int n_qubits, u):
    """Apply a 2x2 complex matrix to ``qubit`` in place (qubit 0 most significant)."""
    cdef double complex u00 = u[0, 0], u01 = u[0, 1], u10 = u[1, 0], u11 = u[1, 1]
    cdef Py_ssize_t stride = 1 << (n_qubits - qubit - 1)
    cdef Py_ssize_t dim = state.shape[0]
    cdef Py_ssize_t base, k
    cdef double complex a, b
    for base in range(0, dim, 2 * stride):
        for k in range(base, base + stride):
            a = state[k]
            b = state[k + stride]
            state[k] = u00 * a + u01 * b
            state[k + stride] = u10 * a + u11 * b
    return np.asarray(state)


def apply_cnot(double complex[::1] state, int control, int target, int n_qubits):
    """Flip ``target`` on basis states whose ``control`` bit is set, in place."""
    cdef Py_ssize_t cbit = 1 << (n_qubits - 1 - control)
    cdef Py_ssize_t tbit = 1 << (n_qubits - 1 - target)
    cdef Py_ssize_t i
    cdef double complex tmp
    for i in range(state.shape[0]):
        if (i & cbit) and not (i & tbit):
            tmp = state[i]
            state[i] = state[i | tbit]
            state[i | tbit] = tmp
    return np.asarray(state)


def _correlate2d_direct(x, w):
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, :, :, ::1] xv = x
    cdef const double[:, :, :, ::1] wv = w
    cdef Py_ssize_t B = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t O = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3]
    cdef Py_ssize_t Ho = H - kh + 1, Wo = W - kw + 1
    out = np.zeros((B, O, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, o, c, p, q, i, j
    cdef double coef
    cdef const double* src
    cdef double* dst
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for p in range(kh):
                    for q in range(kw):
                        coef = wv[o, c, p, q]
                        for i in range(Ho):
                            src = &xv[b, c, i + p, q]
                            dst = &ov[b, o, i, 0]
                            for j in range(Wo):
                                dst[j] += coef * src[j]
    return out
