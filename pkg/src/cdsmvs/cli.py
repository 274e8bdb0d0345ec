"""Command-line entry point: ``cdsmvs <subcommand> ...``.

Usage errors exit with status 2 (argparse), operational failures print a
message to stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import re
import sys
from pathlib import Path

import numpy as np

from . import adcore as ad
from .adcore.checkpoint import CheckpointError
from .geometry import epipolar_direction_field
from .pipeline import FusionParams, eval_cloud, eval_depth, fuse
from .pipeline.ablation import MODE_FILTERS, format_table, run_ablation
from .pipeline.io import (FormatError, read_pfm, read_ply, read_png, read_scene_dir, scene_dirs,
                          scene_samples, write_pfm, write_ply, write_png, write_synthetic_scene)
from .scalespace import normal_curvature_exact
from .synthdata import LAYOUTS, TEXTURES, TRAIN_LAYOUTS, SceneSpec, generate_scene, toy_specs
from .training import (TrainConfig, TrainingDiverged, all_reference_samples, load_config, load_model,
                       samples_from_scene, train)


class CliError(Exception):
    """Operational failure reported as ``error: ...`` with exit status 1."""


def _floats(text: str, n: int | None = None) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _resolution(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return int(m[1]), int(m[2])


def _config_for(ckpt: Path, config: str | None) -> TrainConfig:
    path = Path(config) if config else ckpt.parent / "config.txt"
    if not path.exists():
        raise CliError(f"no config: pass --config or put config.txt next to {ckpt}")
    return load_config(path)


def _load(ckpt: str, config: str | None):
    ckpt = Path(ckpt)
    if not ckpt.exists():
        raise CliError(f"{ckpt}: no such checkpoint")
    cfg = _config_for(ckpt, config)
    return load_model(ckpt, cfg), cfg


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> None:
    kw = dict(texture=args.texture, texture_freq=args.texture_freq, octaves=args.octaves,
              n_views=args.n_views, baseline=args.baseline, resolution=args.resolution,
              distance=args.distance, rig=args.rig, noise_sigma=args.noise)
    out = Path(args.out)
    for i in range(args.scenes):
        layout = args.layout or TRAIN_LAYOUTS[i % len(TRAIN_LAYOUTS)]
        spec = SceneSpec(layout=layout, seed=args.seed + i, **kw)
        root = write_synthetic_scene(out / f"scene_{i:04d}", generate_scene(spec))
        print(root)


def _dataset(root: str, n_src: int) -> list:
    return [s for d in scene_dirs(root) for s in scene_samples(read_scene_dir(d), n_src=n_src)]


def cmd_train(args) -> None:
    cfg = load_config(args.config) if args.config else TrainConfig()
    train_set = _dataset(args.data, args.n_src)
    val_set = _dataset(args.val, args.n_src) if args.val else None
    res = train(train_set, cfg, val=val_set, out_dir=args.out, log=print)
    print(f"final val MAE {res.metrics[-1]['val_mae']:.6f}; checkpoints in {args.out}")


def cmd_depth(args) -> None:
    from .mvscore import View, cascade_forward, fused_confidence

    net, cfg = _load(args.ckpt, args.config)
    data = read_scene_dir(args.scene)
    refs = range(data.n_views) if args.ref is None else [args.ref]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in refs:
        if not 0 <= r < data.n_views:
            raise CliError(f"--ref {r} out of range for {data.n_views} views")
        srcs = data.pairs[r][:args.n_src]
        if not srcs:
            raise CliError(f"view {r} has no source views in pair.txt")
        ref = View(data.images[r], data.cams[r], r)
        with ad.no_grad():
            res = cascade_forward(ref, [View(data.images[i], data.cams[i], i) for i in srcs], net,
                                  cfg.loss.tau_end)
        write_pfm(out / f"depth_{r:04d}.pfm", res.depth_refined.data)
        write_pfm(out / f"conf_{r:04d}.pfm", fused_confidence(res))
        print(out / f"depth_{r:04d}.pfm")


def cmd_curvature(args) -> None:
    image = read_png(args.image)
    h, w = image.shape[-2:]
    field = epipolar_direction_field(np.array(args.epipole), h, w)
    nc = normal_curvature_exact(image, field.omega, args.sigma)
    write_pfm(args.out, nc.values)
    print(f"{args.out}: curvature range [{nc.values.min():.4g}, {nc.values.max():.4g}]")


def cmd_scalemap(args) -> None:
    from .cdsfnet import extract_features

    net, cfg = _load(args.ckpt, args.config)
    image = read_png(args.image)
    if image.ndim == 2:
        image = np.stack([image] * 3)
    with ad.no_grad():
        pyr = extract_features(image, np.array(args.epipole), net.feat, cfg.loss.tau_end)
    weights = pyr.layer_weights.get(args.layer)
    if weights is None:
        raise CliError(f"layer {args.layer!r} has no scale weights (single-scale or unknown layer)")
    wts = weights.data
    k = wts.shape[0]
    scale = wts.argmax(0) / max(k - 1, 1)
    write_png(args.out, scale)
    counts = np.bincount(wts.argmax(0).ravel(), minlength=k) / scale.size
    print(f"{args.out}: scale shares " + " ".join(f"{c:.3f}" for c in counts))


def _indexed(directory: Path, prefix: str) -> dict[int, Path]:
    pat = re.compile(rf"{prefix}(\d+)\.pfm")
    return {int(m[1]): p for p in directory.glob("*.pfm") if (m := pat.fullmatch(p.name))}


def cmd_fuse(args) -> None:
    data = read_scene_dir(args.scene)
    ddir = Path(args.depths)
    depth_files = _indexed(ddir, "depth_") or _indexed(ddir, "")
    if sorted(depth_files) != list(range(data.n_views)):
        raise CliError(f"{ddir}: need one depth map per view (depth_NNNN.pfm or NNNN.pfm)")
    depths = [read_pfm(depth_files[i]).astype(np.float64) for i in range(data.n_views)]
    conf_files = _indexed(ddir, "conf_")
    confs = None
    if conf_files:
        if sorted(conf_files) != list(range(data.n_views)):
            raise CliError(f"{ddir}: confidence maps present for only some views")
        confs = [read_pfm(conf_files[i]).astype(np.float64) for i in range(data.n_views)]
    params = FusionParams(conf_thresh=args.conf_thresh, n_consistent=args.n_consistent,
                          reproj_px=args.reproj_px, rel_depth=args.rel_depth, merge=args.merge)
    cloud = fuse(depths, confs, data.cams, data.images, params)
    write_ply(args.out, cloud)
    print(f"{args.out}: {len(cloud)} points")


def cmd_eval_depth(args) -> None:
    est, gt = read_pfm(args.est).astype(np.float64), read_pfm(args.gt).astype(np.float64)
    if est.shape != gt.shape:
        raise CliError(f"shape mismatch: {est.shape} vs {gt.shape}")
    mask = np.isfinite(gt) & (gt > 0) & np.isfinite(est)
    m = eval_depth(est, gt, mask, args.thresholds)
    for k, v in m.as_dict().items():
        print(f"{k}\t{v:.6f}")


def cmd_eval_cloud(args) -> None:
    m = eval_cloud(read_ply(args.est), read_ply(args.gt), args.dist_thresh)
    for k in ("accuracy", "completeness", "overall", "dist_thresh"):
        print(f"{k}\t{getattr(m, k):.6g}")


def cmd_ablate(args) -> None:
    cfg = load_config(args.config) if args.config else TrainConfig()
    loss = dataclasses.replace(cfg.loss, epochs=args.epochs, seed=args.seed)
    cfg = dataclasses.replace(cfg, loss=loss, model_seed=args.seed)
    over = {"resolution": args.resolution}
    train_set = [s for sp in toy_specs(args.train, args.seed, **over)
                 for s in all_reference_samples(generate_scene(sp))]
    val_set = [samples_from_scene(generate_scene(sp)) for sp in toy_specs(args.val, args.seed + 10_000, **over)]
    rows = run_ablation(train_set, val_set, cfg, MODE_FILTERS[args.mode], out_dir=args.out, log=print)
    print(format_table(rows))


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdsmvs", description="Curvature-guided multi-view stereo toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render synthetic scenes into the dataset layout")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layout", choices=LAYOUTS, default=None, help="default: cycle the training layouts")
    p.add_argument("--texture", choices=TEXTURES, default="perlin")
    p.add_argument("--texture-freq", type=float, default=1.5)
    p.add_argument("--octaves", type=int, default=4)
    p.add_argument("--n-views", type=int, default=3)
    p.add_argument("--baseline", type=float, default=2.0)
    p.add_argument("--resolution", type=_resolution, default=(128, 128), help="HxW")
    p.add_argument("--distance", type=float, default=4.0)
    p.add_argument("--rig", choices=("arc", "linear"), default="arc")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian pixel noise sigma")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--val", default=None, help="held-out dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n-src", type=int, default=2)
    p.set_defaults(fn=cmd_train)

    def model_args(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--config", default=None, help="default: config.txt next to the checkpoint")

    p = sub.add_parser("depth", help="estimate depth and confidence maps")
    model_args(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--ref", type=int, default=None, help="reference view; default every view")
    p.add_argument("--n-src", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_depth)

    p = sub.add_parser("curvature", help="dump the normal-curvature map along epipolar lines")
    p.add_argument("--image", required=True)
    p.add_argument("--epipole", type=lambda s: _floats(s, 3), required=True, help="x,y,z (homogeneous)")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_curvature)

    p = sub.add_parser("scalemap", help="dump the per-pixel selected scale as a PNG")
    model_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--epipole", type=lambda s: _floats(s, 3), required=True, help="x,y,z (homogeneous)")
    p.add_argument("--layer", default="e1")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_scalemap)

    p = sub.add_parser("fuse", help="fuse depth maps into a PLY point cloud")
    p.add_argument("--depths", required=True)
    p.add_argument("--scene", required=True, help="scene directory with cameras and images")
    p.add_argument("--out", required=True)
    d = FusionParams()
    p.add_argument("--conf-thresh", type=float, default=d.conf_thresh)
    p.add_argument("--n-consistent", type=int, default=d.n_consistent)
    p.add_argument("--reproj-px", type=float, default=d.reproj_px)
    p.add_argument("--rel-depth", type=float, default=d.rel_depth)
    p.add_argument("--merge", choices=("average", "reference"), default=d.merge)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("eval-depth", help="precision and MAE of a depth map")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--thresholds", type=_floats, default=(0.125, 0.25))
    p.set_defaults(fn=cmd_eval_depth)

    p = sub.add_parser("eval-cloud", help="accuracy / completeness of a point cloud")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--dist-thresh", type=float, default=None, help="default: 20x GT point spacing")
    p.set_defaults(fn=cmd_eval_cloud)

    p = sub.add_parser("ablate", help="curvature-type x visibility-input grid on synthetic data")
    p.add_argument("--mode", choices=sorted(MODE_FILTERS), default="all")
    p.add_argument("--config", default=None)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--val", type=int, default=3)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=_resolution, default=(128, 128))
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (CliError, FormatError, OSError, ValueError, TrainingDiverged, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
