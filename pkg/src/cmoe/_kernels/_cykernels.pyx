# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the convolution/pooling hot loops.

Mirrors _npkernels exactly, including col2im accumulation order (kernel
offsets outermost) so the two backends are bit-for-bit interchangeable.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    cols_arr = np.zeros((n * oh * ow, c * kh * kw), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef Py_ssize_t bn, ci, oi, oj, i, j, ih, iw, row, col
    with nogil:
        for bn in range(n):
            for oi in range(oh):
                for oj in range(ow):
                    row = (bn * oh + oi) * ow + oj
                    for ci in range(c):
                        for i in range(kh):
                            ih = oi * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(kw):
                                iw = oj * stride - pad + j
                                if iw < 0 or iw >= w:
                                    continue
                                col = (ci * kh + i) * kw + j
                                cols[row, col] = x[bn, ci, ih, iw]
    return cols_arr


def col2im(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t h,
           Py_ssize_t w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t bn, ci, oi, oj, i, j, ih, iw, row, col
    with nogil:
        # kernel offsets outermost: accumulation order matches _npkernels
        for i in range(kh):
            for j in range(kw):
                for bn in range(n):
                    for ci in range(c):
                        col = (ci * kh + i) * kw + j
                        for oi in range(oh):
                            ih = oi * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for oj in range(ow):
                                iw = oj * stride - pad + j
                                if iw < 0 or iw >= w:
                                    continue
                                row = (bn * oh + oi) * ow + oj
                                dx[bn, ci, ih, iw] += cols[row, col]
    return dx_arr


def maxpool2d_forward(floating[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t bn, ci, oi, oj, i, j, ih, iw, best_pos
    cdef floating best, v
    cdef bint seen
    with nogil:
        for bn in range(n):
            for ci in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        best = 0
                        best_pos = -1
                        seen = False
                        for i in range(k):
                            ih = oi * stride - pad + i
                            if ih < 0 or ih >= h:
                                continue
                            for j in range(k):
                                iw = oj * stride - pad + j
                                if iw < 0 or iw >= w:
                                    continue
                                v = x[bn, ci, ih, iw]
                                if not seen or v > best:
                                    best = v
                                    best_pos = ih * w + iw
                                    seen = True
                        out[bn, ci, oi, oj] = best
                        idx[bn, ci, oi, oj] = best_pos
    return out_arr, idx_arr


def maxpool2d_backward(floating[:, :, :, ::1] dout, cnp.int64_t[:, :, :, ::1] idx,
                       Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((n, c, h * w), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t bn, ci, oi, oj
    with nogil:
        for bn in range(n):
            for ci in range(c):
                for oi in range(oh):
                    for oj in range(ow):
                        dx[bn, ci, idx[bn, ci, oi, oj]] += dout[bn, ci, oi, oj]
    return dx_arr.reshape(n, c, h, w)
