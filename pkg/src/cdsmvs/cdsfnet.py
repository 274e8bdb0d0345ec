"""UNet-like feature extractor built from CDSConv layers.

Encoder (input resolution ``H``)::

    e1  3 -> w0        H       sizes first_sizes
    e2  w0 -> w0       H/2     stride 2
    e3  w0 -> w1       H/4     stride 2
    e4  w1 -> w1       H/4
    e5  w1 -> w2       H/8     stride 2
    e6  w2 -> w2       H/8     -> level 0

Decoder: upsample, concatenate the encoder map of that resolution, fuse with
a 1x1 conv and refine with one CDSConv (levels 1 and 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adcore as ad
from .adcore import Module, Param, Tensor
from .cdsconv import CdsConv
from .geometry import epipolar_direction_field, scale_epipole

LEVEL_SCALES = (1 / 8, 1 / 4, 1 / 2)


@dataclass(frozen=True)
class CdsfNetConfig:
    widths: tuple[int, int, int] = (8, 16, 32)
    first_sizes: tuple[int, ...] = (3, 5, 7)
    sizes: tuple[int, ...] = (3, 5)
    mode: str = "learnable"
    seed: int = 0


@dataclass
class FeaturePyramid:
    features: list[Tensor]  # level 0, 1, 2 -> [32, H/8], [16, H/4], [8, H/2]
    curvatures: list[Tensor]  # matching [H_l, W_l] maps
    layer_weights: dict[str, Tensor] = field(default_factory=dict)
    layer_curvatures: dict[str, Tensor] = field(default_factory=dict)


class Conv1x1(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.w = Param(ad.uniform_init(rng, (c_out, c_in, 1, 1), c_in, ad.HE_GAIN))
        self.b = Param(np.zeros(c_out))

    def __call__(self, x) -> Tensor:
        return ad.conv2d(x, self.w, self.b)


def check_divisible(h: int, w: int, factor: int = 8) -> None:
    if h % factor or w % factor:
        ph, pw = -h % factor, -w % factor
        raise ValueError(
            f"image size {h}x{w} must be divisible by {factor}; pad by {ph} rows and {pw} columns "
            f"to {h + ph}x{w + pw}")


class CdsfNet(Module):
    def __init__(self, config: CdsfNetConfig = CdsfNetConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        w0, w1, w2 = config.widths
        s, m = config.sizes, config.mode
        self.e1 = CdsConv(3, w0, config.first_sizes, rng, mode=m)
        self.e2 = CdsConv(w0, w0, s, rng, stride=2, mode=m)
        self.e3 = CdsConv(w0, w1, s, rng, stride=2, mode=m)
        self.e4 = CdsConv(w1, w1, s, rng, mode=m)
        self.e5 = CdsConv(w1, w2, s, rng, stride=2, mode=m)
        self.e6 = CdsConv(w2, w2, s, rng, mode=m)
        self.fuse1 = Conv1x1(w2 + w1, w1, rng)
        self.d1 = CdsConv(w1, w1, s, rng, mode=m)
        self.fuse2 = Conv1x1(w1 + w0, w0, rng)
        self.d2 = CdsConv(w0, w0, s, rng, mode=m)

    def layers(self) -> dict[str, CdsConv]:
        return {name: getattr(self, name) for name in ("e1", "e2", "e3", "e4", "e5", "e6", "d1", "d2")}

    def curvature_params(self) -> list[Param]:
        return [p for layer in self.layers().values() for p in layer.curvature_params()]

    def selection_params(self) -> list[Param]:
        return [p for layer in self.layers().values() for p in layer.selection_params()]

    def __call__(self, image, e: np.ndarray, tau: float = 1.0) -> FeaturePyramid:
        return extract_features(image, e, self, tau)


def direction_fields(e: np.ndarray, h: int, w: int):
    """Epipolar direction fields at full, 1/2, 1/4 and 1/8 resolution."""
    return [epipolar_direction_field(scale_epipole(e, 2.0 ** -i), h >> i, w >> i) for i in range(4)]


def normalize_image(image: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Zero mean, unit variance over all pixels and channels."""
    image = np.asarray(image, dtype=np.float64)
    return (image - image.mean()) / np.sqrt(image.var() + eps)


def extract_features(image, e: np.ndarray, net: CdsfNet, tau: float = 1.0) -> FeaturePyramid:
    """Feature pyramid of ``image[3, H, W]`` guided by the epipole ``e``.

    The image is standardized first (see :func:`normalize_image`).  ``e`` is
    given in the image's own pixel frame; each level uses the epipole
    rescaled to its resolution.
    """
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected an RGB image [3, H, W], got {image.shape}")
    image = Tensor(normalize_image(image))
    h, w = image.shape[1:]
    check_divisible(h, w)
    om = direction_fields(np.asarray(e, dtype=np.float64), h, w)
    lw, lc = {}, {}

    def run(name, x, level):
        out = getattr(net, name)(x, om[level], tau)
        lw[name], lc[name] = out.weights, out.nc_est
        return out

    act = ad.leaky_relu
    x1 = act(run("e1", image, 0).features)
    x2 = act(run("e2", x1, 1).features)
    x3 = act(run("e3", x2, 2).features)
    x4 = act(run("e4", x3, 2).features)
    x5 = act(run("e5", x4, 3).features)
    o0 = run("e6", x5, 3)
    up1 = ad.concat([ad.upsample_bilinear(o0.features), x4], axis=0)
    o1 = run("d1", act(net.fuse1(up1)), 2)
    up2 = ad.concat([ad.upsample_bilinear(o1.features), x2], axis=0)
    o2 = run("d2", act(net.fuse2(up2)), 1)
    return FeaturePyramid(
        features=[o0.features, o1.features, o2.features],
        curvatures=[o0.nc_est, o1.nc_est, o2.nc_est],
        layer_weights=lw,
        layer_curvatures=lc,
    )
