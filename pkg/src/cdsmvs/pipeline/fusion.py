"""Confidence filtering and multi-view geometric-consistency fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Camera, pixel_grid, project, unproject


@dataclass
class PointCloud:
    points: np.ndarray  # [N, 3]
    colors: np.ndarray  # [N, 3] in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)

    @staticmethod
    def empty() -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))

    @staticmethod
    def concat(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud.empty()
        return PointCloud(np.concatenate([c.points for c in clouds]), np.concatenate([c.colors for c in clouds]))


@dataclass(frozen=True)
class FusionParams:
    conf_thresh: float = 0.3
    n_consistent: int = 2
    reproj_px: float = 1.0
    rel_depth: float = 0.01
    merge: str = "average"  # "average" consistent depths, or keep the "reference" depth


@dataclass
class ViewFusion:
    keep: np.ndarray  # [H, W] bool
    n_consistent: np.ndarray  # [H, W] int
    depth: np.ndarray  # [H, W] merged depth


def check_view(r: int, depths, cams, confs, params: FusionParams) -> ViewFusion:
    """Consistency of every pixel of view ``r`` against all other views."""
    d_r = depths[r]
    h, w = d_r.shape
    xs, ys = pixel_grid(h, w)
    cand = (d_r > 0) & np.isfinite(d_r)
    if confs is not None:
        cand &= confs[r] >= params.conf_thresh
    pix = np.stack([xs[cand], ys[cand]], axis=1)
    dr = d_r[cand]
    pts = unproject(pix, dr, cams[r])
    count = np.zeros(len(dr), dtype=np.int64)
    depth_sum = dr.copy()
    for s in range(len(depths)):
        if s == r:
            continue
        d_s = depths[s]
        hs, ws = d_s.shape
        q, z = project(pts, cams[s])
        qi = np.rint(q).astype(np.int64)
        inside = (z > 0) & (qi[:, 0] >= 0) & (qi[:, 0] < ws) & (qi[:, 1] >= 0) & (qi[:, 1] < hs)
        ok = np.zeros(len(dr), dtype=bool)
        idx = np.nonzero(inside)[0]
        ds = d_s[qi[idx, 1], qi[idx, 0]]
        good = (ds > 0) & np.isfinite(ds)
        idx, ds = idx[good], ds[good]
        back = unproject(qi[idx].astype(np.float64), ds, cams[s])
        p_back, z_back = project(back, cams[r])
        err_px = np.linalg.norm(p_back - pix[idx], axis=1)
        rel = np.abs(z_back - dr[idx]) / dr[idx]
        cons = (err_px < params.reproj_px) & (rel < params.rel_depth)
        ok[idx[cons]] = True
        count += ok
        depth_sum[idx[cons]] += z_back[cons]
    keep = np.zeros((h, w), dtype=bool)
    cnt = np.zeros((h, w), dtype=np.int64)
    merged = np.zeros((h, w))
    keep[cand] = count >= params.n_consistent
    cnt[cand] = count
    merged[cand] = depth_sum / (count + 1) if params.merge == "average" else dr
    return ViewFusion(keep, cnt, merged)


def fuse(depths: list[np.ndarray], confs: list[np.ndarray] | None, cams: list[Camera],
         images: list[np.ndarray] | None = None, params: FusionParams = FusionParams()) -> PointCloud:
    """Fuse per-view depth maps into one colored cloud.

    A pixel survives when its confidence reaches ``conf_thresh`` and at
    least ``n_consistent`` other views agree: the depth they see at its
    projection maps back within ``reproj_px`` pixels and ``rel_depth``
    relative depth.  ``confs=None`` skips the confidence filter.
    """
    if len(depths) < 2:
        raise ValueError("fusion needs at least two views")
    if params.merge not in ("average", "reference"):
        raise ValueError(f"merge must be 'average' or 'reference', got {params.merge!r}")
    clouds = []
    for r in range(len(depths)):
        vf = check_view(r, depths, cams, confs, params)
        h, w = vf.keep.shape
        xs, ys = pixel_grid(h, w)
        pix = np.stack([xs[vf.keep], ys[vf.keep]], axis=1)
        pts = unproject(pix, vf.depth[vf.keep], cams[r])
        col = images[r][:, vf.keep].T if images is not None else np.full((len(pts), 3), 0.5)
        clouds.append(PointCloud(pts, col))
    return PointCloud.concat(clouds)
