"""Train on a small synthetic set and report held-out depth metrics.

    python3 scripts/toy_train.py --train 8 --val 4 --epochs 30 --out runs/toy
"""

import argparse
import time

import numpy as np

from cdsmvs.pipeline.metrics import eval_depth
from cdsmvs.synthdata import generate_scene, toy_specs
from cdsmvs.training import (LossConfig, TrainConfig, all_reference_samples, evaluate, samples_from_scene,
                             train)
from cdsmvs import mvscore as mv
from cdsmvs import adcore as ad


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=8)
    ap.add_argument("--val", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--clip-norm", type=float, default=0.0)
    ap.add_argument("--mode", default="learnable")
    ap.add_argument("--no-vis-curvature", action="store_true")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--feat-weight", type=float, default=5.0)
    ap.add_argument("--all-refs", action="store_true", help="every training view takes a turn as reference")
    ap.add_argument("--baseline", type=float, default=None, help="override the toy rig baseline")
    ap.add_argument("--base-planes", type=int, default=48, help="base hypothesis interval = range / N")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    t0 = time.perf_counter()
    over = {} if args.baseline is None else {"baseline": args.baseline}
    scenes = [generate_scene(s) for s in toy_specs(args.train, 0, **over)]
    if args.all_refs:
        train_set = [t for sc in scenes for t in all_reference_samples(sc)]
    else:
        train_set = [samples_from_scene(sc) for sc in scenes]
    val_set = [samples_from_scene(generate_scene(s)) for s in toy_specs(args.val, 10_000, **over)]
    cfg = TrainConfig(loss=LossConfig(epochs=args.epochs, lr=args.lr, seed=args.seed,
                                      feat_weight=args.feat_weight), mode=args.mode,
                      vis_use_curvature=not args.no_vis_curvature, model_seed=args.seed,
                      clip_norm=args.clip_norm, hyp_base_planes=args.base_planes)
    res = train(train_set, cfg, val=val_set, out_dir=args.out, log=lambda m: print(m, flush=True))
    tau = res.metrics[-1]["tau"]
    print("stage MAE", [round(v, 4) for v in evaluate(res.net, val_set, tau)])
    delta = val_set[0].ref.cam.depth_interval
    precs = []
    with ad.no_grad():
        for s in val_set:
            out = mv.cascade_forward(s.ref, s.srcs, res.net, tau)
            precs.append(eval_depth(out.depth_refined.data, s.gt[3], s.mask[3], (2 * delta,)).precision[0])
    print(f"precision@2delta {np.mean(precs):.4f}; epoch-1 MAE {res.metrics[0]['val_mae']:.4f}; "
          f"final {res.metrics[-1]['val_mae']:.4f}; {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
