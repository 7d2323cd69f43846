"""Pure-numpy implementations of the hot convolution/pooling kernels.

These are the fallback for the compiled ``_kernels_c`` extension and are
bitwise-compatible with it: gathers copy the same elements and scatter-adds
accumulate per target element in the same (ky, kx) order, so either backend
can be swapped in without changing any result.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, sh, sw, pt, pb, pl, pr):
    """Unfold [N,C,H,W] into patch rows [N*OH*OW, C*kh*kw], zero-padded."""
    n, c, h, w = x.shape
    hp, wp = h + pt + pb, w + pl + pr
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    s0, s1, s2, s3 = x.strides
    win = as_strided(x, (n, oh, ow, c, kh, kw), (s0, s2 * sh, s3 * sw, s1, s2, s3))
    return win.reshape(n * oh * ow, c * kh * kw)


def col2im(dcol, n, c, h, w, kh, kw, sh, sw, pt, pb, pl, pr):
    """Scatter-add patch rows back onto the [N,C,H,W] input (im2col adjoint)."""
    hp, wp = h + pt + pb, w + pl + pr
    oh = (hp - kh) // sh + 1
    ow = (wp - kw) // sw + 1
    dxp = np.zeros((n, c, hp, wp), dtype=dcol.dtype)
    v = dcol.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + sh * oh:sh, kx:kx + sw * ow:sw] += v[:, :, ky, kx]
    return np.ascontiguousarray(dxp[:, :, pt:pt + h, pl:pl + w])


def maxpool_forward(x, window, stride):
    """Windowed max over [N,C,H,W]; returns (out, flat h*W+w argmax map)."""
    n, c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x, (n, c, oh, ow, window, window), (s0, s1, s2 * stride, s3 * stride, s2, s3)
    )
    flat = win.reshape(n, c, oh, ow, window * window)
    am = flat.argmax(axis=4)
    out = np.take_along_axis(flat, am[..., None], axis=4)[..., 0]
    ih = np.arange(oh).reshape(1, 1, oh, 1) * stride + am // window
    iw = np.arange(ow).reshape(1, 1, 1, ow) * stride + am % window
    return out, (ih * w + iw).astype(np.int64)


def maxpool_backward(dy, idx, h, w):
    """Route upstream gradients to the argmax positions recorded by the forward."""
    n, c, oh, ow = dy.shape
    dxf = np.zeros((n * c, h * w), dtype=dy.dtype)
    rows = np.repeat(np.arange(n * c), oh * ow)
    np.add.at(dxf, (rows, idx.reshape(n * c, -1).ravel()), dy.reshape(n * c, -1).ravel())
    return dxf.reshape(n, c, h, w)
