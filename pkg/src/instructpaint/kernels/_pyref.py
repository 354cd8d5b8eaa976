"""Pure-numpy reference implementations of the hot convolution kernels.

These are the fallback backend; the Cython extension in `_ckernels.pyx`
implements the same contracts. Both operate on contiguous float32/float64
arrays and must agree to floating-point roundoff (im2col is exact copying,
col2im accumulates in the same kh*kw loop order).
"""

import numpy as np


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold [B, C, H, W] into patch columns [B, C*kh*kw, OH*OW]."""
    b, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad > 0:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, :, i, j] = xp[:, :, i:i_end:stride, j:j_end:stride]
    return np.ascontiguousarray(cols.reshape(b, c * kh * kw, oh * ow))


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Scatter-add patch columns back onto the [B, C, H, W] image grid."""
    b, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            xp[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad > 0:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp
