"""Dense n-dimensional array ops sufficient for small CNNs.

Tensors are plain ``numpy.ndarray`` values (row-major, float64 by default;
float32 storage is used for training runs).  All ops are deterministic:
identical inputs give bitwise-identical outputs.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import NumericError, ShapeError

_debug_checks = False


def set_debug_checks(on: bool) -> None:
    """Enable/disable NaN/Inf output checks on every op (test builds)."""
    global _debug_checks
    _debug_checks = bool(on)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _checked(out, op):
    if _debug_checks and not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced a non-finite value")
    return out


def create(shape, fill="zeros", dtype=np.float64):
    """Create a tensor: fill is "zeros", a constant, or ("normal", mean, std, seed)."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    if isinstance(fill, str):
        if fill != "zeros":
            raise ShapeError(f"unknown fill rule {fill!r}")
        return np.zeros(shape, dtype=dtype)
    if isinstance(fill, (int, float)):
        return np.full(shape, fill, dtype=dtype)
    rule, mean, std, seed = fill
    if rule != "normal":
        raise ShapeError(f"unknown fill rule {rule!r}")
    rng = np.random.default_rng(int(seed))
    return rng.normal(mean, std, shape).astype(dtype)


def _broadcast_b(a, b):
    """Shape-check b against a: equal shapes, a [C] channel vector, or
    numpy-style trailing-1 stretching that reproduces a's shape exactly."""
    a = np.asarray(a)
    b = np.asarray(b)
    if b.shape == a.shape:
        return b
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[1]:
        return b.reshape((1, b.shape[0]) + (1,) * (a.ndim - 2))
    try:
        if np.broadcast_shapes(a.shape, b.shape) == a.shape:
            return b
    except ValueError:
        pass
    raise ShapeError(f"cannot broadcast {b.shape} onto {a.shape}")


def ew(a, b, op):
    """Elementwise add/sub/mul; b may broadcast onto a (channel rule above)."""
    a = np.asarray(a)
    b = _broadcast_b(a, b)
    if op == "add":
        out = a + b
    elif op == "sub":
        out = a - b
    elif op == "mul":
        out = a * b
    else:
        raise ShapeError(f"unknown elementwise op {op!r}")
    return _checked(out, f"ew:{op}")


def matmul(a, b):
    """Standard 2-D matrix product."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    return _checked(a @ b, "matmul")


def same_padding(h, w, kh, kw, sh, sw):
    """Zero padding for 'same' output size; the extra pixel goes right/bottom."""
    oh = -(-h // sh)
    ow = -(-w // sw)
    ph = max((oh - 1) * sh + kh - h, 0)
    pw = max((ow - 1) * sw + kw - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def _conv_pads(x_shape, k_shape, stride, padding):
    _, _, h, w = x_shape
    _, _, kh, kw = k_shape
    if padding == "same":
        pads = same_padding(h, w, kh, kw, stride, stride)
    elif padding == "valid":
        pads = (0, 0, 0, 0)
    else:
        raise ShapeError(f"unknown padding {padding!r}")
    pt, pb, pl, pr = pads
    if kh > h + pt + pb or kw > w + pl + pr:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{w + pl + pr}")
    return pads


def conv2d_with_col(x, kernel, stride=1, padding="valid"):
    """Cross-correlation of [N,C,H,W] with [F,C,kh,kw]; also returns the
    im2col patch matrix and padding used, for the backward pass."""
    x = np.ascontiguousarray(x)
    kernel = np.ascontiguousarray(kernel, dtype=x.dtype)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs [N,C,H,W] and [F,C,kh,kw], got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(f"channel mismatch: input has {c}, kernel expects {ck}")
    pads = _conv_pads(x.shape, kernel.shape, stride, padding)
    pt, pb, pl, pr = pads
    oh = (h + pt + pb - kh) // stride + 1
    ow = (w + pl + pr - kw) // stride + 1
    col = backend.kernels.im2col(x, kh, kw, stride, stride, pt, pb, pl, pr)
    out2 = col @ kernel.reshape(f, -1).T
    out = np.ascontiguousarray(out2.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))
    return _checked(out, "conv2d"), col, pads


def conv2d(x, kernel, stride=1, padding="valid"):
    """Cross-correlation (no kernel flip) of [N,C,H,W] with [F,C,kh,kw]."""
    out, _, _ = conv2d_with_col(x, kernel, stride, padding)
    return out


def conv2d_backward(dout, col, x_shape, kernel, stride, pads):
    """Gradients of conv2d w.r.t. input and kernel given the saved patch matrix."""
    n, c, h, w = x_shape
    f, _, kh, kw = kernel.shape
    dmat = np.ascontiguousarray(dout.transpose(0, 2, 3, 1)).reshape(-1, f)
    dkernel = (dmat.T @ col).reshape(kernel.shape)
    dcol = np.ascontiguousarray(dmat @ kernel.reshape(f, -1))
    pt, pb, pl, pr = pads
    dx = backend.kernels.col2im(dcol, n, c, h, w, kh, kw, stride, stride, pt, pb, pl, pr)
    return dx, dkernel


def maxpool2d(x, window, stride=None):
    """Windowed max over [N,C,H,W]; returns (out, argmax index map)."""
    x = np.ascontiguousarray(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d needs [N,C,H,W], got {x.shape}")
    if stride is None:
        stride = window
    _, _, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"window {window} larger than input {h}x{w}")
    out, idx = backend.kernels.maxpool_forward(x, window, stride)
    return _checked(out, "maxpool2d"), idx


def maxpool2d_backward(dy, idx, h, w):
    """Route upstream gradients back through the recorded argmax map."""
    return backend.kernels.maxpool_backward(np.ascontiguousarray(dy), idx, h, w)
