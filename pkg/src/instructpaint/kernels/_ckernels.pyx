# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled im2col/col2im kernels. Contracts match `_pyref` exactly."""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


cpdef int conv_out_size(int size, int k, int stride, int pad):
    return (size + 2 * pad - k) // stride + 1


@cython.boundscheck(False)
@cython.wraparound(False)
def _im2col_impl(floating[:, :, :, ::1] x, floating[:, :, ::1] cols,
                 int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, ch, i, j, oy, ox, iy, ix, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                for ox in range(ow):
                                    cols[n, row, oy * ow + ox] = 0
                                continue
                            for ox in range(ow):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    cols[n, row, oy * ow + ox] = 0
                                else:
                                    cols[n, row, oy * ow + ox] = x[n, ch, iy, ix]


@cython.boundscheck(False)
@cython.wraparound(False)
def _col2im_impl(floating[:, :, ::1] cols, floating[:, :, :, ::1] out,
                 int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t n, ch, i, j, oy, ox, iy, ix, row
    with nogil:
        for n in range(b):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + j - pad
                                if 0 <= ix < w:
                                    out[n, ch, iy, ix] += cols[n, row, oy * ow + ox]


def im2col(x, int kh, int kw, int stride, int pad):
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    x = np.ascontiguousarray(x)
    cols = np.empty((b, c * kh * kw, oh * ow), dtype=x.dtype)
    _im2col_impl(x, cols, kh, kw, stride, pad)
    return cols


def col2im(cols, x_shape, int kh, int kw, int stride, int pad):
    out = np.zeros(x_shape, dtype=cols.dtype)
    cols = np.ascontiguousarray(cols)
    _col2im_impl(cols, out, kh, kw, stride, pad)
    return out
