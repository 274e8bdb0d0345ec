"""Convolutions via im2col + matmul.

Like most learned-filter code these are cross-correlations: an impulse input
reproduces the kernel rotated by 180 degrees.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node

PADDING_MODES = ("reflect", "zero")


def _pad(x: np.ndarray, p: int, axes: tuple[int, ...], mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = [(0, 0)] * x.ndim
    for a in axes:
        width[a] = (p, p)
    return np.pad(x, width, mode="reflect" if mode == "reflect" else "constant")


def _unpad(g: np.ndarray, p: int, axes: tuple[int, ...], mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad`: fold the padded border back onto the input."""
    if p == 0:
        return g
    for a in axes:
        g = np.moveaxis(g, a, -1)
        n = g.shape[-1] - 2 * p
        if mode == "reflect" and p < n:
            # numpy "reflect" mirrors without repeating the edge sample
            core = g[..., p:p + n].copy()
            core[..., 1:p + 1] += g[..., :p][..., ::-1]
            core[..., n - 1 - p:n - 1] += g[..., p + n:][..., ::-1]
        elif mode == "reflect":
            # one-hot map from padded positions to source samples; covers p >= n too
            src = np.pad(np.arange(n), p, mode="reflect")
            fold = np.zeros((n + 2 * p, n))
            fold[np.arange(n + 2 * p), src] = 1.0
            core = g @ fold
        else:
            core = g[..., p:p + n]
        g = np.moveaxis(core, -1, a)
    return g


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "reflect") -> Tensor:
    """2D cross-correlation with "same" padding ``(k - 1) / 2``.

    Args:
        x: input ``[C_in, H, W]``.
        kernel: ``[C_out, C_in, k, k]`` with ``k`` odd.
        bias: optional ``[C_out]``.
        stride: output keeps every ``stride``-th pixel starting at 0.
        padding: ``"reflect"`` (numpy whole-sample reflection) or ``"zero"``.

    Returns:
        ``[C_out, H', W']`` with ``H' = floor((H - 1) / stride) + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if padding not in PADDING_MODES:
        raise ValueError(f"padding must be one of {PADDING_MODES}, got {padding!r}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.ndim != 3 or x.shape[0] != c_in:
        raise ValueError(f"kernel expects {c_in} input channels, input has shape {x.shape}")
    k, p = kh, kh // 2
    _, h, w = x.shape
    xp = _pad(x.data, p, (1, 2), padding)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, ho * wo)
    kmat = kernel.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, ho, wo)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(c_out, c_in, k, k)
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(c_in, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gx = _unpad(dxp, p, (1, 2), padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return make_node(out, parents, bw)


def downsample(x, kernel, bias=None, padding: str = "reflect") -> Tensor:
    """Stride-2 convolution."""
    return conv2d(x, kernel, bias=bias, stride=2, padding=padding)


def conv3d(x, kernel, bias=None, padding: str = "zero") -> Tensor:
    """3D "same" convolution over ``[C_in, D, H, W]`` with ``[C_out, C_in, k, k, k]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    c_out, c_in, k = kernel.shape[:3]
    if x.ndim != 4 or x.shape[0] != c_in:
        raise ValueError(f"kernel expects {c_in} input channels, input has shape {x.shape}")
    if k % 2 == 0 or kernel.shape[2:] != (k, k, k):
        raise ValueError("3D kernel must be cubic with odd size")
    p = k // 2
    _, d, h, w = x.shape
    xp = _pad(x.data, p, (1, 2, 3), padding)
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c_in * k ** 3, d * h * w)
    kmat = kernel.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, d, h, w)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None, None]
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(c_out, -1)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (g2 @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            if padding == "zero":
                # adjoint of a zero-padded "same" correlation: correlate with the flipped kernel
                flipped = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                gp = _pad(g, p, (1, 2, 3), "zero")
                gwin = sliding_window_view(gp, (k, k, k), axis=(1, 2, 3))
                gcols = np.ascontiguousarray(gwin.transpose(0, 4, 5, 6, 1, 2, 3)).reshape(c_out * k ** 3, -1)
                gx = (flipped.reshape(c_in, -1) @ gcols).reshape(x.shape)
            else:
                dcols = (kmat.T @ g2).reshape(c_in, k, k, k, d, h, w)
                dxp = np.zeros_like(xp)
                for a in range(k):
                    for b in range(k):
                        for c in range(k):
                            dxp[:, a:a + d, b:b + h, c:c + w] += dcols[:, a, b, c]
                gx = _unpad(dxp, p, (1, 2, 3), padding)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(1, 2, 3))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return make_node(out, parents, bw)
