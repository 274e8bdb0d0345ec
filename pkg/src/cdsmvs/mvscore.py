"""Cost volumes, visibility-weighted aggregation, regularization and the cascade."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import adcore as ad
from .adcore import Module, Param, Tensor
from .cdsfnet import CdsfNet, CdsfNetConfig, FeaturePyramid, LEVEL_SCALES, check_divisible
from .geometry import (Camera, DepthHypotheses, HypothesisConfig, depth_hypotheses, epipole,
                       warp_feature)

DENOM_FLOOR = 1e-8
VIS_LOGIT_BOUND = 30.0  # sigmoid(30) < 1 in float64, so weights stay inside (0, 1)
CONF_WINDOW = 4


# ------------------------------------------------------------------ costs

def two_view_cost(f_ref, f_src_warped) -> Tensor:
    """Channel-mean inner product: ``[C, H, W]`` x ``[D, C, H, W]`` -> ``[D, H, W]``."""
    f_ref, f_src_warped = ad.as_tensor(f_ref), ad.as_tensor(f_src_warped)
    if f_src_warped.ndim != 4 or f_src_warped.shape[1:] != f_ref.shape:
        raise ValueError(f"warped source {f_src_warped.shape} does not match reference {f_ref.shape}")
    c = f_ref.shape[0]
    return ad.inner_product_channels(ad.reshape(f_ref, (1,) + f_ref.shape), f_src_warped, axis=1) * (1.0 / c)


def cost_entropy(volume) -> Tensor:
    """Entropy over depth of ``softmax(volume)``, per pixel."""
    logp = ad.log_softmax(volume, axis=0)
    p = ad.exp(logp)
    return -ad.sum(p * logp, axis=0)


def aggregate_costs(volumes, weights) -> Tensor:
    """Per-pixel weighted mean ``sum_i W_i V_i / sum_i W_i`` (denominator floored)."""
    if len(volumes) == 0:
        raise ValueError("need at least one cost volume")
    if len(volumes) != len(weights):
        raise ValueError("one weight map per volume is required")
    num = None
    den = None
    for v, w in zip(volumes, weights):
        v, w = ad.as_tensor(v), ad.as_tensor(w)
        if v.shape[1:] != w.shape:
            raise ValueError(f"volume {v.shape} and weight {w.shape} disagree")
        term = v * ad.reshape(w, (1,) + w.shape)
        num = term if num is None else num + term
        den = w if den is None else den + w
    den = ad.clamp_min(den, DENOM_FLOOR)
    return num / ad.reshape(den, (1,) + den.shape)


def regress_depth(prob, hyps) -> Tensor:
    values = hyps.values if isinstance(hyps, DepthHypotheses) else np.asarray(hyps)
    return ad.sum(ad.as_tensor(prob) * values, axis=0)


def confidence(prob) -> np.ndarray:
    """Probability mass in the 4 slices around the argmax.

    The window covers ``argmax - 1 .. argmax + 2`` and is shifted, not
    truncated, where it would leave the volume.
    """
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    d = p.shape[0]
    if d <= CONF_WINDOW:
        return p.sum(axis=0)
    start = np.clip(p.argmax(axis=0) - 1, 0, d - CONF_WINDOW)
    csum = np.concatenate([np.zeros((1,) + p.shape[1:]), np.cumsum(p, axis=0)])
    hi = np.take_along_axis(csum, (start + CONF_WINDOW)[None], axis=0)[0]
    lo = np.take_along_axis(csum, start[None], axis=0)[0]
    return np.clip(hi - lo, 0.0, 1.0)


# -------------------------------------------------------------- networks

class Conv2dBlock(Module):
    def __init__(self, c_in, c_out, rng, k=3, zero=False):
        shape = (c_out, c_in, k, k)
        self.w = Param(np.zeros(shape) if zero else ad.uniform_init(rng, shape, c_in * k * k, ad.HE_GAIN))
        self.b = Param(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b)


class Conv3dBlock(Module):
    def __init__(self, c_in, c_out, rng, k=3, zero=False):
        shape = (c_out, c_in, k, k, k)
        self.w = Param(np.zeros(shape) if zero else ad.uniform_init(rng, shape, c_in * k ** 3, ad.HE_GAIN))
        self.b = Param(np.zeros(c_out))

    def __call__(self, x):
        return ad.conv3d(x, self.w, self.b)


class VisNet(Module):
    """``[nc, H] -> sigmoid`` view weight; ``use_curvature=False`` drops the nc input."""

    def __init__(self, rng, use_curvature: bool = True, hidden: int = 8):
        self.use_curvature = use_curvature
        self.c1 = Conv2dBlock(2 if use_curvature else 1, hidden, rng)
        self.c2 = Conv2dBlock(hidden, 1, rng, zero=True)

    def __call__(self, nc, entropy) -> Tensor:
        entropy = ad.as_tensor(entropy)
        shape = (1,) + entropy.shape
        parts = [ad.reshape(nc, shape)] if self.use_curvature else []
        x = ad.concat(parts + [ad.reshape(entropy, shape)], axis=0)
        logit = ad.clamp(self.c2(ad.leaky_relu(self.c1(x))), -VIS_LOGIT_BOUND, VIS_LOGIT_BOUND)
        return ad.sigmoid(logit)[0]


def visibility_weight(nc_est, entropy, vis_net: VisNet) -> Tensor:
    return vis_net(nc_est, entropy)


class CostRegularizer(Module):
    """Residual 3D conv stack followed by softmax over depth."""

    def __init__(self, rng, hidden: int = 8):
        self.c1 = Conv3dBlock(1, hidden, rng)
        self.c2 = Conv3dBlock(hidden, hidden, rng)
        self.c3 = Conv3dBlock(hidden, 1, rng, zero=True)

    def __call__(self, volume) -> Tensor:
        volume = ad.as_tensor(volume)
        x = ad.reshape(volume, (1,) + volume.shape)
        h = ad.leaky_relu(self.c1(x))
        h = ad.leaky_relu(self.c2(h))
        return ad.softmax(volume + self.c3(h)[0], axis=0)


def regularize(volume, reg_net: CostRegularizer) -> Tensor:
    return reg_net(volume)


class RefineNet(Module):
    def __init__(self, rng, hidden: int = 16):
        self.c1 = Conv2dBlock(4, hidden, rng)
        self.c2 = Conv2dBlock(hidden, hidden, rng)
        self.c3 = Conv2dBlock(hidden, 1, rng, zero=True)

    def __call__(self, depth_up, image, d_min: float, d_max: float) -> Tensor:
        depth_up = ad.as_tensor(depth_up)
        span = d_max - d_min
        norm = (depth_up - d_min) * (1.0 / span)
        x = ad.concat([ad.reshape(norm, (1,) + norm.shape), ad.as_tensor(image)], axis=0)
        h = ad.leaky_relu(self.c1(x))
        h = ad.leaky_relu(self.c2(h))
        return depth_up + self.c3(h)[0] * span


def refine_depth(depth_up, image, refine_net: RefineNet, d_min: float, d_max: float) -> Tensor:
    return refine_net(depth_up, image, d_min, d_max)


@dataclass(frozen=True)
class MvsConfig:
    features: CdsfNetConfig = CdsfNetConfig()
    hypotheses: HypothesisConfig = HypothesisConfig()
    vis_use_curvature: bool = True
    reg_hidden: int = 8
    refine_hidden: int = 16
    seed: int = 0


class MvsNet(Module):
    def __init__(self, config: MvsConfig = MvsConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed + 7919)
        self.feat = CdsfNet(config.features)
        self.vis = [VisNet(rng, config.vis_use_curvature) for _ in range(3)]
        self.reg = [CostRegularizer(rng, config.reg_hidden) for _ in range(3)]
        self.refine = RefineNet(rng, config.refine_hidden)

    def curvature_params(self) -> list[Param]:
        return self.feat.curvature_params()

    def selection_params(self) -> list[Param]:
        return self.feat.selection_params()


# --------------------------------------------------------------- cascade

@dataclass
class View:
    image: np.ndarray  # [3, H, W] in [0, 1]
    cam: Camera  # full-resolution camera
    index: int = 0


@dataclass
class PairFeatures:
    ref: FeaturePyramid
    src: FeaturePyramid
    e_ref: np.ndarray
    e_src: np.ndarray


@dataclass
class StageOutput:
    hyps: DepthHypotheses
    prob: Tensor
    depth: Tensor
    conf: np.ndarray
    volumes: list[Tensor] = field(default_factory=list)
    vis: list[Tensor] = field(default_factory=list)
    valid: list[np.ndarray] = field(default_factory=list)


@dataclass
class CascadeOutput:
    stages: list[StageOutput]
    depth_refined: Tensor
    conf_refined: np.ndarray
    pairs: list[PairFeatures]

    @property
    def depths(self) -> list[Tensor]:
        return [s.depth for s in self.stages] + [self.depth_refined]

    @property
    def confs(self) -> list[np.ndarray]:
        return [s.conf for s in self.stages] + [self.conf_refined]


FeatureFn = Callable[[np.ndarray, np.ndarray], FeaturePyramid]


class FeatureCache:
    """Pyramids keyed by view and epipole; a reference view paired with
    different sources gets different entries."""

    def __init__(self, fn: FeatureFn):
        self.fn = fn
        self.store: dict[tuple, FeaturePyramid] = {}
        self.misses = 0

    def get(self, view: View, e: np.ndarray) -> FeaturePyramid:
        key = (view.index, id(view.image)) + tuple(np.round(np.asarray(e, dtype=np.float64), 12))
        if key not in self.store:
            self.misses += 1
            self.store[key] = self.fn(view.image, e)
        return self.store[key]


def identity_features(image: np.ndarray, e: np.ndarray) -> FeaturePyramid:
    """Test hook: per-level subsampled RGB normalised to unit length per pixel."""
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    feats, curvs = [], []
    for s in LEVEL_SCALES:
        step = int(round(1 / s))
        f = image[:, ::step, ::step]
        f = f / np.maximum(np.linalg.norm(f, axis=0, keepdims=True), 1e-12)
        feats.append(Tensor(f))
        curvs.append(Tensor(np.zeros(f.shape[1:])))
    return FeaturePyramid(feats, curvs)


def cascade_forward(ref: View, srcs: list[View], net: MvsNet, tau: float = 1.0,
                    feature_fn: FeatureFn | None = None, cache: FeatureCache | None = None) -> CascadeOutput:
    """Coarse-to-fine depth for ``ref`` from ``srcs`` (stages 0-2 plus refinement)."""
    if not srcs:
        raise ValueError("need at least one source view")
    h, w = ref.image.shape[1:]
    check_divisible(h, w)
    if cache is None:
        fn = feature_fn or (lambda img, e: net.feat(img, e, tau))
        cache = FeatureCache(fn)
    pairs = []
    for src in srcs:
        e_ref = epipole(ref.cam, src.cam)
        e_src = epipole(src.cam, ref.cam)
        pairs.append(PairFeatures(cache.get(ref, e_ref), cache.get(src, e_src), e_ref, e_src))

    stages: list[StageOutput] = []
    prev = None
    for level in range(3):
        cam_ref = ref.cam.at_level(level)
        shape = (h >> (3 - level), w >> (3 - level))
        hyps = depth_hypotheses(level, prev, cam_ref, net.config.hypotheses, shape=shape)
        vols, vis, valids = [], [], []
        for src, pair in zip(srcs, pairs):
            warped, valid = warp_feature(pair.src.features[level], cam_ref, src.cam.at_level(level), hyps)
            v = two_view_cost(pair.ref.features[level], warped)
            ent = cost_entropy(v)
            vols.append(v)
            vis.append(net.vis[level](pair.ref.curvatures[level], ent))
            valids.append(valid)
        agg = aggregate_costs(vols, vis)
        prob = net.reg[level](agg)
        depth = regress_depth(prob, hyps)
        stages.append(StageOutput(hyps, prob, depth, confidence(prob), vols, vis, valids))
        prev = depth.data

    depth_up = ad.upsample_bilinear(stages[-1].depth)
    refined = net.refine(depth_up, ref.image, ref.cam.d_min, ref.cam.d_max)
    conf_up = ad.upsample_bilinear(stages[-1].conf).data
    return CascadeOutput(stages, refined, conf_up, pairs)


def fused_confidence(out: CascadeOutput) -> np.ndarray:
    """Product of all stage confidences at full resolution."""
    total = None
    for s in out.stages:
        c = s.conf
        while c.shape[0] < out.conf_refined.shape[0]:
            c = ad.upsample_bilinear(c).data
        total = c if total is None else total * c
    return np.clip(total, 0.0, 1.0)
