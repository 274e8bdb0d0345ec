"""Bilinear sampling at continuous pixel coordinates."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import Tensor, as_tensor, make_node


def sample_validity(coords: np.ndarray, h: int, w: int, tol: float = 1e-6) -> np.ndarray:
    """True where a sample point lies inside ``[0, w-1] x [0, h-1]``.

    ``tol`` pixels of slack absorb round-off on exact border hits.
    """
    cx, cy = coords[0], coords[1]
    return (cx >= -tol) & (cx <= w - 1 + tol) & (cy >= -tol) & (cy <= h - 1 + tol)


def grid_sample_bilinear(x, coords) -> Tensor:
    """Sample ``x[C, H, W]`` at pixel coordinates ``coords[2, ...]`` = (x, y).

    Corners falling outside the image contribute zero, so points fully outside
    return 0.  Output has shape ``[C, *coords.shape[1:]]`` and is
    differentiable w.r.t. both the input and the coordinates.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    c, h, w = x.shape
    out_shape = coords.shape[1:]
    cx = coords.data[0].reshape(-1)
    cy = coords.data[1].reshape(-1)
    n = cx.size
    x0 = np.floor(cx)
    y0 = np.floor(cy)
    fx = cx - x0
    fy = cy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        # d(weight)/dcx and d(weight)/dcy for this corner
        dwx = (1.0 if dx else -1.0) * wy
        dwy = (1.0 if dy else -1.0) * wx
        idx = np.where(inside, yi * w + xi, 0)
        corners.append((idx, inside, wx * wy * inside, dwx * inside, dwy * inside))

    rows = np.concatenate([np.arange(n)] * 4)
    cols = np.concatenate([cr[0] for cr in corners])
    vals = np.concatenate([cr[2] for cr in corners])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, h * w))
    flat = x.data.reshape(c, h * w)
    out = (mat @ flat.T).T.reshape((c,) + out_shape)

    def bw(g):
        g2 = g.reshape(c, n)
        gx = gc = None
        if x.requires_grad:
            gx = (mat.T @ g2.T).T.reshape(c, h, w)
        if coords.requires_grad:
            gcx = np.zeros(n)
            gcy = np.zeros(n)
            for idx, inside, _, dwx, dwy in corners:
                v = flat[:, idx] * inside
                s = (g2 * v).sum(axis=0)
                gcx += s * dwx
                gcy += s * dwy
            gc = np.stack([gcx, gcy]).reshape(coords.shape)
        return gx, gc

    return make_node(np.ascontiguousarray(out), (x, coords), bw)
