"""Curvature-guided dynamic scale convolution.

A layer holds ``K`` candidate kernel sizes.  For each size it computes a
feature response and a normal-curvature estimate along the epipolar
direction, a small classifier turns the ``K`` curvature maps into per-pixel
softmax weights, and both features and curvatures are blended with them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from .adcore import Module, Param, Tensor
from .geometry import EpipolarField
from .scalespace import gaussian_bank

CURV_INIT_SCALE = 0.01
MODES = ("learnable", "original")


def scale_sigma(size: int) -> float:
    """Gaussian scale matched to a kernel of width ``size`` (3 sigma support)."""
    return size / 6.0


def omega_arrays(omega, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(omega, EpipolarField):
        u, v = omega.u, omega.v
    else:
        om = np.asarray(omega, dtype=np.float64)
        if om.shape == (2,):
            u, v = np.full(shape, om[0]), np.full(shape, om[1])
        else:
            u, v = om[0], om[1]
    if u.shape != tuple(shape):
        raise ValueError(f"direction field is {u.shape}, layer output is {tuple(shape)}")
    return u, v


@dataclass
class CdsConvOutput:
    features: Tensor  # [C_out, H, W]
    nc_est: Tensor  # [H, W]
    weights: Tensor  # [K, H, W], sums to 1 per pixel
    curvs: Tensor  # [K, H, W]


class CdsConv(Module):
    """One CDSConv layer.

    Args:
        c_in, c_out: channel counts.
        sizes: candidate kernel sizes, 1 to 4 odd values.
        rng: generator for the feature and selector initialisation.
        stride: 1, or 2 for a downsampling layer (all outputs at the stride).
        mode: ``"learnable"`` curvature kernels, or ``"original"`` which
            evaluates the exact curvature formula on the channel mean with
            frozen Gaussian derivative filters.
        hidden: selector hidden width.
    """

    def __init__(self, c_in: int, c_out: int, sizes=(3, 5), rng: np.random.Generator | None = None,
                 stride: int = 1, mode: str = "learnable", hidden: int = 8):
        if not 1 <= len(sizes) <= 4:
            raise ValueError(f"need 1 to 4 candidate sizes, got {sizes}")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.sizes = tuple(int(k) for k in sizes)
        self.stride = stride
        self.mode = mode
        n = len(self.sizes)

        # the selector starts near a uniform mix of K independent candidates, which
        # divides the output variance by K; sqrt(K) in the gain restores it
        gain = ad.HE_GAIN * np.sqrt(len(self.sizes))
        self.feat = [Param(ad.uniform_init(rng, (c_out, c_in, k, k), c_in * k * k, gain)) for k in self.sizes]
        self.bias = Param(np.zeros(c_out))
        self.kxx, self.kxy, self.kyy = [], [], []
        self._orig_banks = []
        for k in self.sizes:
            bank = gaussian_bank(scale_sigma(k), size=k)
            if mode == "learnable":
                for store, g in ((self.kxx, bank.G_xx), (self.kxy, bank.G_xy), (self.kyy, bank.G_yy)):
                    store.append(Param(np.broadcast_to(g * CURV_INIT_SCALE, (1, c_in, k, k)).copy()))
            else:
                # cross-correlation needs the 180-degree flip of convolution kernels;
                # only the odd first-derivative filters change sign
                stack = np.stack([-bank.G_x, -bank.G_y, bank.G_xx, bank.G_xy, bank.G_yy])
                self._orig_banks.append(stack[:, None])
        if n > 1:
            self.sel1_w = Param(ad.uniform_init(rng, (hidden, n, 3, 3), n * 9))
            self.sel1_b = Param(np.zeros(hidden))
            self.sel2_w = Param(ad.uniform_init(rng, (n, hidden, 3, 3), hidden * 9))
            self.sel2_b = Param(np.zeros(n))

    @property
    def n_scales(self) -> int:
        return len(self.sizes)

    def curvature_params(self) -> list[Param]:
        return [p for group in (self.kxx, self.kxy, self.kyy) for p in group]

    def selection_params(self) -> list[Param]:
        """Parameters upstream of the temperature softmax (curvature kernels and selector)."""
        sel = [self.sel1_w, self.sel1_b, self.sel2_w, self.sel2_b] if self.n_scales > 1 else []
        return self.curvature_params() + sel

    def set_identity_selector(self, gain: float = 1.0, freeze: bool = True) -> None:
        """Make the selector output ``gain * curvs`` exactly.

        Hidden channels carry ``+x`` and ``-x``; ``lrelu(x) - lrelu(-x) = (1 + slope) x``.
        """
        n = self.n_scales
        if n == 1:
            return
        hidden = self.sel1_w.shape[0]
        if hidden < 2 * n:
            raise ValueError("identity selector needs at least 2K hidden channels")
        w1 = np.zeros_like(self.sel1_w.data)
        w2 = np.zeros_like(self.sel2_w.data)
        for k in range(n):
            w1[k, k, 1, 1] = 1.0
            w1[n + k, k, 1, 1] = -1.0
            w2[k, k, 1, 1] = gain / (1 + ad.functional.LEAKY_SLOPE)
            w2[k, n + k, 1, 1] = -gain / (1 + ad.functional.LEAKY_SLOPE)
        self.sel1_w.data, self.sel2_w.data = w1, w2
        self.sel1_b.data = np.zeros_like(self.sel1_b.data)
        self.sel2_b.data = np.zeros_like(self.sel2_b.data)
        if freeze:
            for p in (self.sel1_w, self.sel1_b, self.sel2_w, self.sel2_b):
                p.freeze()

    # ------------------------------------------------------------ pieces

    def _curvature_from_responses(self, resp: Tensor, u: np.ndarray, v: np.ndarray) -> Tensor:
        """``resp`` is ``[3, H, W]`` (xx, xy, yy) for the learnable form."""
        return resp[0] * (u * u) + resp[1] * (2 * u * v) + resp[2] * (v * v)

    def _original_curvature(self, x: Tensor, index: int, u: np.ndarray, v: np.ndarray) -> Tensor:
        gray = ad.mean(x, axis=0, keepdims=True)
        d = ad.conv2d(gray, self._orig_banks[index], stride=self.stride)
        ix, iy, ixx, ixy, iyy = d[0], d[1], d[2], d[3], d[4]
        num = ixx * (u * u) + ixy * (2 * u * v) + iyy * (v * v)
        den = ad.sqrt(1.0 + ix * ix + iy * iy) * (1.0 + ad.square(ix * u + iy * v))
        return num / den

    def _scale_outputs(self, x: Tensor, index: int, u, v) -> tuple[Tensor, Tensor]:
        """Feature response ``[C_out, H, W]`` and curvature ``[H, W]`` for one scale."""
        if self.mode == "learnable":
            kernel = ad.concat([self.feat[index], self.kxx[index], self.kxy[index], self.kyy[index]], axis=0)
            out = ad.conv2d(x, kernel, stride=self.stride)
            c = self.c_out
            return out[:c], self._curvature_from_responses(out[c:], u, v)
        feats = ad.conv2d(x, self.feat[index], stride=self.stride)
        return feats, self._original_curvature(x, index, u, v)

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        return (h - 1) // self.stride + 1, (w - 1) // self.stride + 1

    def learnable_curvature(self, x, omega, index: int) -> Tensor:
        x = ad.as_tensor(x)
        u, v = omega_arrays(omega, self.output_shape(*x.shape[1:]))
        if self.mode == "original":
            return self._original_curvature(x, index, u, v)
        kernel = ad.concat([self.kxx[index], self.kxy[index], self.kyy[index]], axis=0)
        return self._curvature_from_responses(ad.conv2d(x, kernel, stride=self.stride), u, v)

    def selector_logits(self, curvs: Tensor) -> Tensor:
        h = ad.leaky_relu(ad.conv2d(curvs, self.sel1_w, self.sel1_b))
        return ad.conv2d(h, self.sel2_w, self.sel2_b)

    def select_scale(self, curvs, tau: float) -> Tensor:
        curvs = ad.as_tensor(curvs)
        if self.n_scales == 1:
            if not tau > 0:
                raise ValueError(f"temperature must be positive, got {tau}")
            return ad.Tensor(np.ones(curvs.shape))
        return ad.softmax_temperature(self.selector_logits(curvs), tau, axis=0)

    def __call__(self, x, omega, tau: float = 1.0) -> CdsConvOutput:
        x = ad.as_tensor(x)
        if x.shape[0] != self.c_in:
            raise ValueError(f"layer expects {self.c_in} channels, got {x.shape[0]}")
        u, v = omega_arrays(omega, self.output_shape(*x.shape[1:]))
        feats, curvs = [], []
        for i in range(self.n_scales):
            f, c = self._scale_outputs(x, i, u, v)
            feats.append(f)
            curvs.append(c)
        if self.n_scales == 1:
            curv_stack = ad.reshape(curvs[0], (1,) + curvs[0].shape)
            weights = self.select_scale(curv_stack, tau)
            out = feats[0]
            nc = curvs[0]
        else:
            curv_stack = ad.stack(curvs, axis=0)
            weights = self.select_scale(curv_stack, tau)
            out = feats[0] * weights[0:1]
            for i in range(1, self.n_scales):
                out = out + feats[i] * weights[i:i + 1]
            nc = ad.sum(curv_stack * weights, axis=0)
        out = out + ad.reshape(self.bias, (self.c_out, 1, 1))
        return CdsConvOutput(out, nc, weights, curv_stack)


def learnable_curvature(f_in, omega, scale_index: int, layer: CdsConv) -> Tensor:
    return layer.learnable_curvature(f_in, omega, scale_index)


def select_scale(curvs, layer: CdsConv, tau: float) -> Tensor:
    return layer.select_scale(curvs, tau)


def cdsconv_forward(f_in, omega, layer: CdsConv, tau: float) -> CdsConvOutput:
    return layer(f_in, omega, tau)
