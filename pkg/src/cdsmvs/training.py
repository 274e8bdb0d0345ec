"""Losses, negative-depth sampling, temperature annealing and the SGD loop."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import adcore as ad
from .adcore import Tensor
from .cdsfnet import CdsfNetConfig, FeaturePyramid
from .geometry import Camera, DepthHypotheses, HypothesisConfig, warp_feature
from .mvscore import CascadeOutput, MvsConfig, MvsNet, View, cascade_forward, two_view_cost

NEG_RANGE = (0.5, 4.0)  # |d_neg - d_gt| in units of the base interval
METRICS_HEADER = ("epoch", "tau", "l_feat", "l_depth0", "l_depth1", "l_depth2", "l_depth3",
                  "l_total", "val_mae", "val_mae0", "val_mae1", "val_mae2", "val_mae3")


class EmptySupervision(ValueError):
    """No valid ground-truth pixel to supervise."""


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.01
    lambda2: float = 0.1
    feat_weight: float = 5.0
    n_neg: int = 3
    tau_start: float = 1.0
    tau_end: float = 0.01
    epochs: int = 30
    lr: float = 0.01
    seed: int = 0
    reg_all_weights: bool = False  # lambda1 on every feature weight, not only curvature kernels

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "feat_weight", "tau_start", "tau_end"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_neg < 1 or self.epochs < 1:
            raise ValueError("n_neg and epochs must be at least 1")
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.tau_end > self.tau_start:
            raise ValueError("tau_end must not exceed tau_start")


@dataclass
class TrainSample:
    ref: View
    srcs: list[View]
    gt: list[np.ndarray]  # stages 0..3: [H/8], [H/4], [H/2], [H]
    mask: list[np.ndarray]

    def __post_init__(self):
        for g, m in zip(self.gt, self.mask):
            if np.any(g[m] <= 0):
                raise ValueError("ground-truth depth must be positive where the mask is set")


def stage_downsample(depth: np.ndarray, mask: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """GT per cascade stage by pixel subsampling, matching the level intrinsics."""
    gts, masks = [], []
    for s in (8, 4, 2, 1):
        gts.append(np.ascontiguousarray(depth[::s, ::s]))
        masks.append(np.ascontiguousarray(mask[::s, ::s]))
    return gts, masks


def make_sample(images: list[np.ndarray], cams: list[Camera], depth: np.ndarray, mask: np.ndarray,
                ref: int = 0, srcs: list[int] | None = None) -> TrainSample:
    srcs = [i for i in range(len(images)) if i != ref] if srcs is None else srcs
    gts, masks = stage_downsample(depth, mask & (depth > 0))
    return TrainSample(View(images[ref], cams[ref], ref), [View(images[i], cams[i], i) for i in srcs],
                       gts, masks)


def samples_from_scene(scene, ref: int = 0) -> TrainSample:
    """Reference view ``ref`` against all other views of a synthetic scene."""
    v = scene.views[ref]
    return make_sample([v.image for v in scene.views], scene.cams, v.depth, v.mask, ref=ref)


def all_reference_samples(scene) -> list[TrainSample]:
    """One sample per view, each view taking a turn as the reference."""
    return [samples_from_scene(scene, r) for r in range(len(scene.views))]


# ------------------------------------------------------------------ losses

def sample_negative_depths(d_gt: np.ndarray, interval: float, n_neg: int, rng: np.random.Generator) -> np.ndarray:
    """``[n_neg, H, W]`` depths at ``d_gt +- u * interval`` with ``u ~ U[0.5, 4]``."""
    if n_neg < 1:
        raise ValueError("n_neg must be at least 1")
    d_gt = np.asarray(d_gt, dtype=np.float64)
    mag = rng.uniform(*NEG_RANGE, size=(n_neg,) + d_gt.shape)
    sign = np.where(rng.random((n_neg,) + d_gt.shape) < 0.5, -1.0, 1.0)
    return d_gt[None] + sign * mag * interval


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    m = mask.astype(np.float64)
    n = m.sum()
    if n == 0:
        raise EmptySupervision("no valid ground-truth pixels")
    return ad.sum(x * m) * (1.0 / n)


def pair_bce(f_ref, f_src, cam_ref: Camera, cam_src: Camera, d_gt: np.ndarray, d_neg: np.ndarray,
             mask: np.ndarray) -> Tensor:
    """BCE of the matching cost: GT depth as positive, ``d_neg`` as negatives.

    Pixels whose GT correspondence leaves the source image are dropped.
    """
    hyps = DepthHypotheses(np.concatenate([d_gt[None], d_neg]), stage=-1)
    warped, valid = warp_feature(f_src, cam_ref, cam_src, hyps)
    v = two_view_cost(f_ref, warped)  # [1 + N, H, W]
    n = d_neg.shape[0]
    pos = ad.log_sigmoid(v[0])
    neg = ad.sum(ad.log_sigmoid(-v[1:]), axis=0) * (1.0 / n)
    return _masked_mean(-(pos + neg), mask & valid[0])


def curvature_penalty(pyramids: list[FeaturePyramid]) -> Tensor:
    """Mean squared estimated curvature, summed over layers, averaged over pyramids."""
    terms = []
    for pyr in pyramids:
        for nc in pyr.layer_curvatures.values():
            terms.append(ad.mean(ad.square(nc)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(pyramids))


def weight_penalty(params) -> Tensor | float:
    total = 0.0
    for p in params:
        total = ad.sum(ad.square(p)) + total
    return total


def feature_loss(out: CascadeOutput, sample: TrainSample, net: MvsNet, cfg: LossConfig,
                 rng: np.random.Generator) -> Tensor:
    """BCE over pairs and pyramid levels plus the kernel and curvature penalties.

    Negatives at level ``l`` are drawn in units of ``interval_scales[l]``
    camera depth intervals ((d_max - d_min) / 48), so they sit at a similar
    pixel offset on every level.  This is independent of the hypothesis
    spacing: negatives much closer than a pixel cannot be told apart.
    """
    scales = net.config.hypotheses.interval_scales
    data = []
    for src, pair in zip(sample.srcs, out.pairs):
        for level in range(3):
            interval = scales[level] * sample.ref.cam.depth_interval
            d_gt, m = sample.gt[level], sample.mask[level]
            if not m.any():
                continue
            d_neg = sample_negative_depths(np.where(m, d_gt, sample.ref.cam.d_min), interval, cfg.n_neg, rng)
            try:
                data.append(pair_bce(pair.ref.features[level], pair.src.features[level],
                                     sample.ref.cam.at_level(level), src.cam.at_level(level),
                                     np.where(m, d_gt, 1.0), d_neg, m))
            except EmptySupervision:
                continue
    if not data:
        raise EmptySupervision("no pair/level has valid supervision")
    term = data[0]
    for d in data[1:]:
        term = term + d
    term = term * (1.0 / len(data))
    kernels = net.feat.trainable() if cfg.reg_all_weights else [p for p in net.curvature_params() if p.requires_grad]
    pyramids = [p.ref for p in out.pairs]
    if pyramids[0].layer_curvatures:
        term = term + cfg.lambda2 * curvature_penalty(pyramids)
    return term + cfg.lambda1 * weight_penalty(kernels)


def depth_loss(d_est, d_gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute depth error over ``mask``."""
    d_est = ad.as_tensor(d_est)
    if d_est.shape != np.shape(d_gt):
        raise ValueError(f"shape mismatch {d_est.shape} vs {np.shape(d_gt)}")
    return _masked_mean(ad.abs(d_est - np.where(mask, d_gt, 0.0)), mask)


def total_loss(l_feat, l_depth: list, feat_weight: float = 5.0):
    if len(l_depth) != 4:
        raise ValueError(f"expected 4 stage losses, got {len(l_depth)}")
    total = l_feat * feat_weight
    for d in l_depth:
        total = total + d
    return total


def anneal_tau(epoch: int, cfg: LossConfig) -> float:
    """Geometric decay from ``tau_start`` (epoch 0) to ``tau_end`` (last epoch)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.tau_start
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** (epoch / (cfg.epochs - 1))


# ------------------------------------------------------------ config file

@dataclass(frozen=True)
class TrainConfig:
    """Loss settings plus the model switches the ablation grid varies."""

    loss: LossConfig = LossConfig()
    mode: str = "learnable"
    vis_use_curvature: bool = True
    model_seed: int = 0
    clip_norm: float = 10.0  # global gradient norm cap; 0 disables
    # Scale-selection gradients grow like 1/tau; scaling the step of the
    # parameters feeding the softmax by tau/tau_start keeps their updates even.
    tau_scaled_lr: bool = True
    # Base hypothesis interval is (d_max - d_min) / hyp_base_planes.
    hyp_base_planes: int = 48

    def model_config(self) -> MvsConfig:
        return MvsConfig(features=CdsfNetConfig(mode=self.mode, seed=self.model_seed),
                         hypotheses=HypothesisConfig(base_planes=self.hyp_base_planes),
                         vis_use_curvature=self.vis_use_curvature, seed=self.model_seed)


def _parse_value(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    return type(like)(raw.strip())


def parse_config(text: str) -> TrainConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    loss_fields = {f.name: f for f in dataclasses.fields(LossConfig)}
    top_fields = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "loss"}
    base = TrainConfig()
    loss_kw, top_kw = {}, {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in loss_fields:
            loss_kw[key] = _parse_value(raw, getattr(base.loss, key))
        elif key in top_fields:
            top_kw[key] = _parse_value(raw, getattr(base, key))
        else:
            raise ValueError(f"line {n}: unknown key {key!r}")
    return TrainConfig(loss=LossConfig(**loss_kw), **top_kw)


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg.loss, f.name)}" for f in dataclasses.fields(LossConfig)]
    lines += [f"{f.name} = {getattr(cfg, f.name)}" for f in dataclasses.fields(TrainConfig) if f.name != "loss"]
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# ------------------------------------------------------------------ loop

@dataclass
class TrainResult:
    net: MvsNet
    metrics: list[dict] = field(default_factory=list)
    best_mae: float = float("inf")
    best_epoch: int = -1


def sample_losses(net: MvsNet, sample: TrainSample, cfg: LossConfig, tau: float,
                  rng: np.random.Generator) -> tuple[Tensor, Tensor, list[Tensor], CascadeOutput]:
    out = cascade_forward(sample.ref, sample.srcs, net, tau)
    l_feat = feature_loss(out, sample, net, cfg, rng)
    l_depth = [depth_loss(d, g, m) for d, g, m in zip(out.depths, sample.gt, sample.mask)]
    return total_loss(l_feat, l_depth, cfg.feat_weight), l_feat, l_depth, out


def evaluate(net: MvsNet, samples: list[TrainSample], tau: float) -> list[float]:
    """Mean absolute error per stage (0..3) averaged over samples."""
    errs = np.zeros(4)
    with ad.no_grad():
        for s in samples:
            out = cascade_forward(s.ref, s.srcs, net, tau)
            errs += [float(np.abs(d.data - g)[m].mean()) for d, g, m in zip(out.depths, s.gt, s.mask)]
    return list(errs / len(samples))


def clip_gradients(params, max_norm: float) -> float:
    """Rescale gradients so the ``lr_mult``-weighted step has norm at most ``max_norm``."""
    norm = float(np.sqrt(sum(((p.lr_mult * p.grad) ** 2).sum() for p in params if p.grad is not None)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def train(samples: list[TrainSample], cfg: TrainConfig, val: list[TrainSample] | None = None,
          out_dir=None, net: MvsNet | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Seeded SGD over ``samples`` with batch size 1.

    Writes ``metrics.csv``, ``best.ckpt``, ``final.ckpt`` and ``config.txt``
    to ``out_dir`` when given.  Validation MAE uses ``val`` or, if absent,
    the training samples.
    """
    if not samples:
        raise ValueError("need at least one training sample")
    lc = cfg.loss
    net = net or MvsNet(cfg.model_config())
    val = val or samples
    order_rng = np.random.default_rng([lc.seed, 0])
    neg_rng = np.random.default_rng([lc.seed, 1])
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(format_config(cfg))
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
    result = TrainResult(net)
    params = net.trainable()
    try:
        for epoch in range(lc.epochs):
            t0 = time.perf_counter()
            tau = anneal_tau(epoch, lc)
            if cfg.tau_scaled_lr:
                for p in net.selection_params():
                    p.lr_mult = tau / lc.tau_start
            sums = np.zeros(6)
            for idx in order_rng.permutation(len(samples)):
                total, l_feat, l_depth, _ = sample_losses(net, samples[idx], lc, tau, neg_rng)
                vals = [l_feat.item()] + [d.item() for d in l_depth] + [total.item()]
                if not np.all(np.isfinite(vals)):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {vals}")
                sums += vals
                ad.backward(total)
                if cfg.clip_norm > 0:
                    clip_gradients(params, cfg.clip_norm)
                ad.sgd_step(params, lc.lr)
            maes = evaluate(net, val, tau)
            if not np.all(np.isfinite([p.data.sum() for p in params])):
                raise TrainingDiverged(f"non-finite weights after epoch {epoch}")
            row = dict(zip(METRICS_HEADER, [epoch, tau, *(sums / len(samples)), maes[3], *maes]))
            row["seconds"] = time.perf_counter() - t0
            result.metrics.append(row)
            if maes[3] < result.best_mae:
                result.best_mae, result.best_epoch = maes[3], epoch
                if out is not None:
                    ad.save_checkpoint(out / "best.ckpt", net.state_dict())
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])
                fh.flush()
            if log:
                log(f"epoch {epoch:3d} tau {tau:.4f} loss {row['l_total']:.4f} feat {row['l_feat']:.4f} "
                    f"val_mae {' '.join(f'{m:.4f}' for m in maes)} ({row['seconds']:.1f}s)")
        if out is not None:
            ad.save_checkpoint(out / "final.ckpt", net.state_dict())
    finally:
        if writer is not None:
            fh.close()
    return result


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def load_model(ckpt, cfg: TrainConfig) -> MvsNet:
    net = MvsNet(cfg.model_config())
    net.load_state_dict(ad.load_checkpoint(ckpt))
    return net
