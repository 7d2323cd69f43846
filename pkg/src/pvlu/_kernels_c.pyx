# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution/pooling kernels.

Same contracts as ``_kernels_py``; scatter-adds accumulate per target element
in the same (ky, kx) order so both backends produce bitwise-identical output.
"""

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int sh, int sw,
           int pt, int pb, int pl, int pr):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t hp = h + pt + pb, wp = w + pl + pr
    cdef Py_ssize_t oh = (hp - kh) // sh + 1, ow = (wp - kw) // sw + 1
    if real is float:
        col_np = np.zeros((n * oh * ow, c * kh * kw), dtype=np.float32)
    else:
        col_np = np.zeros((n * oh * ow, c * kh * kw), dtype=np.float64)
    cdef real[:, ::1] col = col_np
    cdef Py_ssize_t i, ci, ky, kx, oy, ox, ih, iw, row
    with nogil:
        for i in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (i * oh + oy) * ow + ox
                    for ci in range(c):
                        for ky in range(kh):
                            ih = oy * sh + ky - pt
                            if ih < 0 or ih >= h:
                                continue
                            for kx in range(kw):
                                iw = ox * sw + kx - pl
                                if 0 <= iw < w:
                                    col[row, (ci * kh + ky) * kw + kx] = x[i, ci, ih, iw]
    return col_np


def col2im(real[:, ::1] dcol, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           int kh, int kw, int sh, int sw, int pt, int pb, int pl, int pr):
    cdef Py_ssize_t hp = h + pt + pb, wp = w + pl + pr
    cdef Py_ssize_t oh = (hp - kh) // sh + 1, ow = (wp - kw) // sw + 1
    if real is float:
        dx_np = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        dx_np = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] dx = dx_np
    cdef Py_ssize_t i, ci, ky, kx, oy, ox, ih, iw
    with nogil:
        for i in range(n):
            for ci in range(c):
                # (ky, kx) stays outermost over the spatial loops: overlapping
                # pixels accumulate in the same order as the numpy fallback.
                for ky in range(kh):
                    for kx in range(kw):
                        for oy in range(oh):
                            ih = oy * sh + ky - pt
                            if ih < 0 or ih >= h:
                                continue
                            for ox in range(ow):
                                iw = ox * sw + kx - pl
                                if 0 <= iw < w:
                                    dx[i, ci, ih, iw] += dcol[(i * oh + oy) * ow + ox,
                                                              (ci * kh + ky) * kw + kx]
    return dx_np


def maxpool_forward(real[:, :, :, ::1] x, int window, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - window) // stride + 1, ow = (w - window) // stride + 1
    if real is float:
        out_np = np.empty((n, c, oh, ow), dtype=np.float32)
    else:
        out_np = np.empty((n, c, oh, ow), dtype=np.float64)
    idx_np = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_np
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_np
    cdef Py_ssize_t i, ci, oy, ox, a, b, bh, bw
    cdef real best, v
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        bh = oy * stride
                        bw = ox * stride
                        best = x[i, ci, bh, bw]
                        for a in range(window):
                            for b in range(window):
                                v = x[i, ci, oy * stride + a, ox * stride + b]
                                if v > best:  # strict: ties keep the first index
                                    best = v
                                    bh = oy * stride + a
                                    bw = ox * stride + b
                        out[i, ci, oy, ox] = best
                        idx[i, ci, oy, ox] = bh * w + bw
    return out_np, idx_np


def maxpool_backward(real[:, :, :, ::1] dy, cnp.int64_t[:, :, :, ::1] idx,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dy.shape[0], c = dy.shape[1], oh = dy.shape[2], ow = dy.shape[3]
    if real is float:
        dx_np = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        dx_np = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] dx = dx_np
    cdef Py_ssize_t i, ci, oy, ox, f
    with nogil:
        for i in range(n):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        f = idx[i, ci, oy, ox]
                        dx[i, ci, f // w, f % w] += dy[i, ci, oy, ox]
    return dx_np
