"""Differentiable elementwise, reduction and shape primitives."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_node

LEAKY_SLOPE = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return make_node(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_node(np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g * 0.5 / out,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    xd = x.data
    return make_node(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return make_node(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x) -> Tensor:
    """Numerically stable ``log(sigmoid(x))``."""
    x = as_tensor(x)
    xd = x.data
    out = np.minimum(xd, 0.0) - np.log1p(np.exp(-np.abs(xd)))
    return make_node(out, (x,), lambda g: (g * _sigmoid(-xd),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    fancy = _has_array(key)

    def bw(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return make_node(x.data[key], (x,), bw)


def _has_array(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def concat(xs, axis: int = 0) -> Tensor:
    """Concatenate along ``axis`` (channel axis 0 for [C,H,W] maps)."""
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return make_node(np.concatenate([x.data for x in xs], axis=axis), xs,
                     lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)
    return make_node(np.stack([x.data for x in xs], axis=axis), xs,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def inner_product_channels(a, b, axis: int = -3) -> Tensor:
    """Per-pixel inner product over the channel axis (broadcasting)."""
    return sum(mul(a, b), axis=axis)


def softmax_temperature(logits, tau: float, axis: int = 0) -> Tensor:
    """Softmax of ``logits / tau`` along ``axis``, max-subtracted."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    x = as_tensor(logits)
    z = x.data / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out / tau,)

    return make_node(out, (x,), bw)


def softmax(logits, axis: int = 0) -> Tensor:
    return softmax_temperature(logits, 1.0, axis=axis)


def log_softmax(logits, axis: int = 0) -> Tensor:
    x = as_tensor(logits)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return make_node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where a bound is active."""
    x = as_tensor(x)
    lo = -np.inf if lo is None else lo
    hi = np.inf if hi is None else hi
    keep = (x.data >= lo) & (x.data <= hi)
    return make_node(np.clip(x.data, lo, hi), (x,), lambda g: (g * keep,))


def clamp_min(x, floor: float) -> Tensor:
    """``max(x, floor)``; the gradient is zero where the floor is active."""
    return clamp(x, lo=floor)


def _interp_matrix(n_in: int) -> np.ndarray:
    """Linear ×2 upsampling along one axis; output i sits at input i/2."""
    n_out = 2 * n_in
    pos = np.minimum(np.arange(n_out) / 2.0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = pos - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1.0 - w1
    m[np.arange(n_out), i1] += w1
    return m


def upsample_bilinear(x) -> Tensor:
    """Bilinear ×2 upsampling of the last two axes.

    The sampling grid matches stride-2 subsampling: output pixel ``i`` reads
    input coordinate ``i / 2``; coordinates past the last row/column clamp.
    """
    x = as_tensor(x)
    h, w = x.shape[-2:]
    mh, mw = _interp_matrix(h), _interp_matrix(w)
    out = mh @ x.data @ mw.T
    return make_node(out, (x,), lambda g: (mh.T @ g @ mw,))
