# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled NHWC kernels for 3x3 patch extraction and 2x2 max pooling.

Every routine here has a numpy twin in ``_fallback.py`` with an identical
signature; ``kernels.py`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col3x3(const double[:, :, :, ::1] x, int stride, int pad_top,
              int pad_left, int ho, int wo):
    """Gather 3x3 patches of an NHWC array into rows of ``(n*ho*wo, 9*c)``.

    Out-of-bounds taps read as zero, so padding never has to be materialized.
    """
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    out_arr = np.empty((n * ho * wo, 9 * c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ky, kx, ch, iy, ix, row, col0
    cdef bint inside
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    for ky in range(3):
                        iy = oy * stride + ky - pad_top
                        for kx in range(3):
                            ix = ox * stride + kx - pad_left
                            col0 = (ky * 3 + kx) * c
                            inside = 0 <= iy < h and 0 <= ix < w
                            if inside:
                                for ch in range(c):
                                    out[row, col0 + ch] = x[b, iy, ix, ch]
                            else:
                                for ch in range(c):
                                    out[row, col0 + ch] = 0.0
    return out_arr


def col2im3x3(const double[:, ::1] cols, int n, int h, int w, int c,
              int stride, int pad_top, int pad_left, int ho, int wo):
    """Scatter-add patch rows back into an ``(n, h, w, c)`` array (adjoint of im2col)."""
    out_arr = np.zeros((n, h, w, c), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oy, ox, ky, kx, ch, iy, ix, row, col0
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    for ky in range(3):
                        iy = oy * stride + ky - pad_top
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(3):
                            ix = ox * stride + kx - pad_left
                            if ix < 0 or ix >= w:
                                continue
                            col0 = (ky * 3 + kx) * c
                            for ch in range(c):
                                out[b, iy, ix, ch] += cols[row, col0 + ch]
    return out_arr


def maxpool2x2_forward(const double[:, :, :, ::1] x):
    """2x2/stride-2 max pool. Returns (pooled, winner index 0..3, tie mask).

    Ties go to the first window element in row-major order; the tie mask
    flags windows where the maximum is shared.
    """
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    out_arr = np.empty((n, ho, wo, c), dtype=np.float64)
    idx_arr = np.empty((n, ho, wo, c), dtype=np.int8)
    tie_arr = np.zeros((n, ho, wo, c), dtype=np.uint8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef signed char[:, :, :, ::1] idx = idx_arr
    cdef unsigned char[:, :, :, ::1] tie = tie_arr
    cdef Py_ssize_t b, oy, ox, ch, k
    cdef double best, v
    cdef signed char arg
    cdef unsigned char tied
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * oy, 2 * ox, ch]
                        arg = 0
                        tied = 0
                        for k in range(1, 4):
                            v = x[b, 2 * oy + k // 2, 2 * ox + k % 2, ch]
                            if v > best:
                                best = v
                                arg = <signed char>k
                                tied = 0
                            elif v == best:
                                tied = 1
                        out[b, oy, ox, ch] = best
                        idx[b, oy, ox, ch] = arg
                        tie[b, oy, ox, ch] = tied
    return out_arr, idx_arr, tie_arr


def maxpool2x2_backward(const double[:, :, :, ::1] dout,
                        const signed char[:, :, :, ::1] idx, int h, int w):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2]
    cdef Py_ssize_t c = dout.shape[3]
    dx_arr = np.zeros((n, h, w, dout.shape[3]), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, oy, ox, ch, k
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    for ch in range(c):
                        k = idx[b, oy, ox, ch]
                        dx[b, 2 * oy + k // 2, 2 * ox + k % 2, ch] = dout[b, oy, ox, ch]
    return dx_arr
