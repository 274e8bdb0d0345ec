"""The curvature-type x visibility-input ablation grid on synthetic data."""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import adcore as ad
from ..mvscore import cascade_forward
from ..training import TrainConfig, TrainingDiverged, TrainSample, train
from .metrics import eval_depth

# name -> (curvature type, visibility net sees curvature)
VARIANTS = {
    "A": ("original", False),
    "B": ("original", True),
    "C": ("learnable", False),
    "D": ("learnable", True),
}
MODE_FILTERS = {
    "all": "ABCD",
    "learnable": "CD",
    "original": "AB",
    "vis": "BD",
    "no-vis": "AC",
}
TABLE_COLUMNS = ("model", "curv", "vis_curv", "prec_2d", "prec_4d", "mae", "diverged", "seconds")


@dataclass
class AblationRow:
    model: str
    curv: str
    vis_curv: bool
    prec_2d: float
    prec_4d: float
    mae: float
    diverged: bool
    seconds: float


def evaluate_depth(net, samples: list[TrainSample], tau: float) -> tuple[float, float, float]:
    """Mean precision at 2 and 4 base intervals and MAE of the refined depth."""
    p2, p4, mae = [], [], []
    with ad.no_grad():
        for s in samples:
            out = cascade_forward(s.ref, s.srcs, net, tau)
            delta = s.ref.cam.depth_interval
            m = eval_depth(out.depth_refined.data, s.gt[3], s.mask[3], (2 * delta, 4 * delta))
            p2.append(m.precision[0])
            p4.append(m.precision[1])
            mae.append(m.mae)
    return float(np.mean(p2)), float(np.mean(p4)), float(np.mean(mae))


def run_ablation(train_set: list[TrainSample], val_set: list[TrainSample], base: TrainConfig,
                 models: str = "ABCD", out_dir=None, log=None) -> list[AblationRow]:
    """Train each selected variant from the same seed and split."""
    rows = []
    for name in models:
        curv, vis_curv = VARIANTS[name]
        cfg = dataclasses.replace(base, mode=curv, vis_use_curvature=vis_curv)
        sub = Path(out_dir) / f"model_{name}" if out_dir is not None else None
        t0 = time.perf_counter()
        try:
            res = train(train_set, cfg, val=val_set, out_dir=sub, log=log)
            tau = res.metrics[-1]["tau"]
            p2, p4, mae = evaluate_depth(res.net, val_set, tau)
            diverged = not np.isfinite(mae)
        except TrainingDiverged as exc:
            if log:
                log(f"model {name} diverged: {exc}")
            p2 = p4 = mae = float("nan")
            diverged = True
        rows.append(AblationRow(name, curv, vis_curv, p2, p4, mae, diverged, time.perf_counter() - t0))
    if out_dir is not None:
        write_table(Path(out_dir) / "ablation.csv", rows)
    return rows


def write_table(path, rows: list[AblationRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS[:-1])
        for r in rows:
            w.writerow([r.model, r.curv, int(r.vis_curv), repr(r.prec_2d), repr(r.prec_4d), repr(r.mae),
                        int(r.diverged)])


def format_table(rows: list[AblationRow]) -> str:
    lines = ["model  curv       vis_curv  prec@2d  prec@4d  MAE     time(s)",
             "-----  ---------  --------  -------  -------  ------  -------"]
    for r in rows:
        flag = " (diverged)" if r.diverged else ""
        lines.append(f"{r.model:<5}  {r.curv:<9}  {'yes' if r.vis_curv else 'no':<8}  {100 * r.prec_2d:6.2f}%  "
                     f"{100 * r.prec_4d:6.2f}%  {r.mae:.4f}  {r.seconds:7.1f}{flag}")
    return "\n".join(lines)
