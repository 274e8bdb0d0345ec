"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-5,
                   index: np.ndarray | None = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``x``.

    Only the flat positions in ``index`` are probed (all when ``None``);
    unprobed entries are left at zero.
    """
    x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    positions = np.arange(flat.size) if index is None else index
    out = np.zeros(flat.size)
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_probes: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Relative error between backprop and central-difference gradients.

    The error is ``||g_ad - g_fd|| / max(||g_ad||, ||g_fd||, 1e-12)`` over the
    probed entries of all inputs.  With ``max_probes`` set, that many random
    entries per input are probed instead of all of them.

    Returns:
        The relative error (0 for a perfect match).
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn()
    backward(loss)
    diffs, refs_ad, refs_fd = [], [], []
    for t in inputs:
        ad = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        index = None
        if max_probes is not None and t.size > max_probes:
            index = rng.choice(t.size, size=max_probes, replace=False)
        fd = numerical_grad(fn, t, eps=eps, index=index)
        if index is not None:
            ad = ad.reshape(-1)[index]
            fd = fd.reshape(-1)[index]
        diffs.append((ad - fd).ravel())
        refs_ad.append(ad.ravel())
        refs_fd.append(fd.ravel())
        t.grad = None
    d = np.linalg.norm(np.concatenate(diffs))
    scale = max(np.linalg.norm(np.concatenate(refs_ad)), np.linalg.norm(np.concatenate(refs_fd)), 1e-12)
    return float(d / scale)
