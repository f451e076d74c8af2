# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel Gaussian smoothing kernels.

Arrays are channel-last (n, h, w, c) so the innermost loop runs over
contiguous channel values. Sigma maps are float64 (n, h, w).
"""

import numpy as np

from libc.math cimport ceil, exp
from libc.stdlib cimport free, malloc

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _reflect(Py_ssize_t p, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t period
    if n == 1:
        return 0
    period = 2 * (n - 1)
    p = p % period
    if p < 0:
        p += period
    if p >= n:
        p = period - p
    return p


cdef inline int _taps(double sigma, int cap, double* a, double* m2) noexcept nogil:
    # normalized 1-D taps a[0..2r]; m2 = sum a[u] u^2
    cdef int r = <int>ceil(3.0 * sigma)
    cdef int k
    cdef double s = 0.0, m = 0.0, t
    if r > cap:
        r = cap
    for k in range(2 * r + 1):
        t = (k - r) / sigma
        a[k] = exp(-0.5 * t * t)
        s += a[k]
    for k in range(2 * r + 1):
        a[k] /= s
        m += a[k] * (k - r) * (k - r)
    m2[0] = m
    return r


cdef Py_ssize_t[::1] _reflect_table(Py_ssize_t n, int cap):
    cdef Py_ssize_t[::1] table = np.empty(n + 2 * cap, dtype=np.intp)
    cdef Py_ssize_t p
    for p in range(n + 2 * cap):
        table[p] = _reflect(p - cap, n)
    return table


def smooth_forward(real[:, :, :, ::1] field, double[:, :, ::1] sigma, int cap):
    cdef Py_ssize_t n = field.shape[0], h = field.shape[1], w = field.shape[2], c = field.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t[::1] rh = _reflect_table(h, cap)
    cdef Py_ssize_t[::1] rw = _reflect_table(w, cap)
    cdef double* a = <double*>malloc((2 * cap + 1) * sizeof(double))
    cdef double m2
    cdef int r, u, v
    cdef Py_ssize_t b, i, j, ch, ii, jj
    cdef real k
    cdef real* po
    cdef real* pf
    if a == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        r = _taps(sigma[b, i, j], cap, a, &m2)
                        po = &out[b, i, j, 0]
                        for u in range(-r, r + 1):
                            ii = rh[i + u + cap]
                            for v in range(-r, r + 1):
                                jj = rw[j + v + cap]
                                k = <real>(a[u + r] * a[v + r])
                                pf = &field[b, ii, jj, 0]
                                for ch in range(c):
                                    po[ch] += k * pf[ch]
    finally:
        free(a)
    return out_arr


def smooth_backward(real[:, :, :, ::1] grad_out, real[:, :, :, ::1] field,
                    double[:, :, ::1] sigma, int cap):
    cdef Py_ssize_t n = field.shape[0], h = field.shape[1], w = field.shape[2], c = field.shape[3]
    dtype = np.float32 if real is float else np.float64
    gf_arr = np.zeros((n, h, w, c), dtype=dtype)
    gs_arr = np.zeros((n, h, w), dtype=np.float64)
    acc0_arr = np.zeros(c, dtype=dtype)
    acc2_arr = np.zeros(c, dtype=dtype)
    cdef real[:, :, :, ::1] gf = gf_arr
    cdef double[:, :, ::1] gs = gs_arr
    cdef real[::1] acc0 = acc0_arr
    cdef real[::1] acc2 = acc2_arr
    cdef Py_ssize_t[::1] rh = _reflect_table(h, cap)
    cdef Py_ssize_t[::1] rw = _reflect_table(w, cap)
    cdef double* a = <double*>malloc((2 * cap + 1) * sizeof(double))
    cdef double m2, s, kk, d0, d2
    cdef int r, u, v
    cdef Py_ssize_t b, i, j, ch, ii, jj
    cdef real k, kq
    cdef real* pg
    cdef real* pf
    cdef real* pgf
    cdef real* p0 = &acc0[0]
    cdef real* p2 = &acc2[0]
    if a == NULL:
        raise MemoryError()
    try:
        with nogil:
            for b in range(n):
                for i in range(h):
                    for j in range(w):
                        s = sigma[b, i, j]
                        r = _taps(s, cap, a, &m2)
                        pg = &grad_out[b, i, j, 0]
                        for ch in range(c):
                            p0[ch] = 0
                            p2[ch] = 0
                        for u in range(-r, r + 1):
                            ii = rh[i + u + cap]
                            for v in range(-r, r + 1):
                                jj = rw[j + v + cap]
                                kk = a[u + r] * a[v + r]
                                k = <real>kk
                                kq = <real>(kk * (u * u + v * v))
                                pf = &field[b, ii, jj, 0]
                                pgf = &gf[b, ii, jj, 0]
                                # separate loops keep each one vectorizable
                                for ch in range(c):
                                    pgf[ch] += k * pg[ch]
                                for ch in range(c):
                                    p0[ch] += k * pf[ch]
                                    p2[ch] += kq * pf[ch]
                        # dK/dsigma = K (u^2 + v^2 - 2 m2) / sigma^3
                        d0 = 0.0
                        d2 = 0.0
                        for ch in range(c):
                            d0 += pg[ch] * p0[ch]
                            d2 += pg[ch] * p2[ch]
                        gs[b, i, j] = (d2 - 2.0 * m2 * d0) / (s * s * s)
    finally:
        free(a)
    return gf_arr, gs_arr
