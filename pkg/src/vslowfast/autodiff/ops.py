"""Differentiable operations.

Every function takes and returns :class:`Tensor` objects. Elementwise binary ops
accept two tensors of identical shape, or a tensor and a Python scalar; there is
no other broadcasting.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import dsp
from . import oracles
from .tensor import ShapeError, Tensor, as_tensor, make

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return make(a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        return add(mul(b, -1.0), a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = as_tensor(a)
        return make(a.data * b, (a,), lambda g: (g * b,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def square(x: Tensor) -> Tensor:
    return make(x.data ** 2, (x,), lambda g: (2.0 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make(np.log(x.data), (x,), lambda g: (g / x.data,))


def log1p(x: Tensor) -> Tensor:
    return make(np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return make(x.data * scale, (x,), lambda g: (g * scale,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ----------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = x.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make(out, (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis), 1.0 / float(count))


# -------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ndim = xs[0].ndim
    axis = axis % ndim
    for x in xs[1:]:
        if x.ndim != ndim or any(x.shape[d] != xs[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]} on axis {axis}")
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def take(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make(x.data[index].copy(), (x,), back)


# ------------------------------------------------------------------- products

# When set, forward values of the product kernels come from the loop oracles,
# which tally every multiplication they perform into this counter.
_reference: oracles.Counter | None = None


@contextmanager
def reference_kernels(counter: oracles.Counter):
    global _reference
    previous, _reference = _reference, counter
    try:
        yield counter
    finally:
        _reference = previous


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched product of 3-D tensors with equal batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: need two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: inner dimension mismatch {a.shape} @ {b.shape}")

    out = a.data @ b.data if _reference is None else oracles.matmul(a.data, b.data, _reference)

    def back(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make(out, (a, b), back)


def outer(u: Tensor, v: Tensor) -> Tensor:
    if u.ndim != 1 or v.ndim != 1:
        raise ShapeError(f"outer: need vectors, got {u.shape} and {v.shape}")
    out = np.outer(u.data, v.data) if _reference is None else oracles.outer(u.data, v.data, _reference)
    return make(out, (u, v), lambda g: (g @ v.data, g.T @ u.data))


# --------------------------------------------------------------- convolutions

def _out_extent(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """View of shape (N, C, ho, wo, k, k) over a padded NCHW array."""
    span = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(2, 3))
    return win[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride, ::dilation, ::dilation]


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Contiguous (N*ho*wo, C*k*k) patch matrix of a padded NCHW array."""
    n, c = xp.shape[:2]
    win = _windows(xp, k, stride, dilation, ho, wo).transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(win).reshape(n * ho * wo, c * k * k)


def _scatter(cols: np.ndarray, out_hw, k: int, stride: int, dilation: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: cols (C, k, k, N, ho, wo) -> summed NCHW array."""
    c, _, _, n, ho, wo = cols.shape
    out = np.zeros((c, n) + tuple(out_hw))
    for i in range(k):
        for j in range(k):
            r, s = i * dilation, j * dilation
            out[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _rows(g: np.ndarray) -> np.ndarray:
    """NCHW -> (N*H*W, C)."""
    return np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, g.shape[1])


def _nchw(rows: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(rows.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    return x if pad == 0 else x[:, :, pad:-pad, pad:-pad]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           dilation: int = 1) -> Tensor:
    """Cross-correlation of NCHW input with an (O, I, K, K) kernel."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: bad shapes {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, i, k, _ = w.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {i}")
    ho, wo = (_out_extent(s, k, stride, pad, dilation) for s in (h, wd))
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: non-positive output extent {ho}x{wo} for input {h}x{wd}")
    xp = _pad(x.data, pad)
    cols = _im2col(xp, k, stride, dilation, ho, wo)
    w2 = w.data.reshape(o, -1)
    if _reference is None:
        out = _nchw(cols @ w2.T, n, ho, wo)
    else:
        out = oracles.conv2d_counted(x.data, w.data, None, stride, pad, dilation, _reference)
    parents = (x, w) if bias is None else (x, w, bias)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[None, :, None, None]

    def back(g):
        gw = (_rows(g).T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(w.data, g, axes=([0], [1]))  # (C, K, K, N, ho, wo)
            gx = _unpad(_scatter(gcols, xp.shape[2:], k, stride, dilation), pad)
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return make(out, parents, back)


def conv_transpose2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                     pad: int = 0) -> Tensor:
    """Transposed convolution with an (I, O, K, K) kernel (the adjoint of conv2d)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv_transpose2d: bad shapes {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    i, o, k, _ = w.shape
    if c != i:
        raise ShapeError(f"conv_transpose2d: input has {c} channels, kernel expects {i}")
    ho, wo = (h - 1) * stride - 2 * pad + k, (wd - 1) * stride - 2 * pad + k
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d: non-positive output extent {ho}x{wo}")
    if _reference is None:
        cols = np.tensordot(w.data, x.data, axes=([0], [1]))  # (O, K, K, N, H, W)
        out = _unpad(_scatter(cols, (ho + 2 * pad, wo + 2 * pad), k, stride, 1), pad)
    else:
        out = oracles.conv_transpose2d(x.data, w.data, None, stride, pad, _reference)
    parents = (x, w) if bias is None else (x, w, bias)
    if bias is not None:
        if bias.shape != (o,):
            raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[None, :, None, None]

    def back(g):
        gcols = _im2col(_pad(g, pad), k, stride, 1, h, wd)  # (N*h*wd, O*K*K)
        gx = _nchw(gcols @ w.data.reshape(i, -1).T, n, h, wd) if x.requires_grad else None
        gw = (_rows(x.data).T @ gcols).reshape(w.shape) if w.requires_grad else None
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return make(out, parents, back)


# ---------------------------------------------------------------- normalizing

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, eps: float = BN_EPS,
                momentum: float = BN_MOMENTUM) -> Tensor:
    """Per-channel normalisation of NCHW input.

    In training mode the batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batchnorm2d: parameters do not match {c} channels")
    if training:
        count = x.size // c
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            gx = inv[None, :, None, None] * (
                gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return make(out, (x, gamma, beta), back)


# -------------------------------------------------------------------- pooling

def max_pool2d(x: Tensor, k, stride=None) -> Tensor:
    """Windowed maximum; the gradient goes to the first (row-major) maximum."""
    kh, kw = (k, k) if isinstance(k, int) else k
    sh, sw = (kh, kw) if stride is None else ((stride, stride) if isinstance(stride, int) else stride)
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise ShapeError(f"max_pool2d: window {kh}x{kw} exceeds input {h}x{w}")
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        rows = np.arange(ho)[:, None] * sh + arg // kw
        cols = np.arange(wo)[None, :] * sw + arg % kw
        nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(gx, (nn[..., None, None], cc[..., None, None], rows, cols), g)
        return (gx,)

    return make(out, (x,), back)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Average over all spatial positions: NCHW -> NC."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_avg_pool: expected NCHW, got {x.shape}")
    return mean(x, axis=(2, 3))


# ----------------------------------------------------------------- resampling

def temporal_downsample(x: Tensor, alpha: int) -> Tensor:
    if alpha == 1:
        return x
    out = dsp.temporal_downsample(x.data, alpha)
    return make(out, (x,), lambda g: (np.repeat(g, alpha, axis=-1) / alpha,))


def temporal_upsample(x: Tensor, alpha: int) -> Tensor:
    if alpha == 1:
        return x
    out = dsp.temporal_upsample(x.data, alpha)
    return make(out, (x,), lambda g: (g.reshape(*x.shape, alpha).sum(axis=-1),))


# --------------------------------------------------------------------- losses

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross entropy on logits, in the overflow-free form."""
    t = np.asarray(getattr(targets, "data", targets), dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {t.shape}")
    if np.any((t < 0) | (t > 1)):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    return make(per.mean(), (logits,), lambda g: (g * (_sigmoid(z) - t) / count,))


PROB_CLAMP = 1e-12


def bce(p: Tensor, targets) -> Tensor:
    """Mean binary cross entropy on probabilities clamped to [1e-12, 1 - 1e-12]."""
    t = np.asarray(getattr(targets, "data", targets), dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"bce: shape mismatch {p.shape} vs {t.shape}")
    if np.any((t < 0) | (t > 1)):
        raise ValueError("bce: targets must lie in [0, 1]")
    q = clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = mul(log(q), t) if np.any(t) else None
    neg = mul(log(sub(1.0, q)), 1.0 - t) if np.any(t < 1) else None
    total = pos if neg is None else (neg if pos is None else add(pos, neg))
    return mul(mean(total), -1.0)
