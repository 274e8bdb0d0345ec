"""Pinhole cameras, epipoles, plane-sweep warps and depth hypotheses.

Conventions: pixel coordinates are ``(x, y)`` = (column, row) with integer
values at pixel centers.  ``R, t`` map world points into the camera frame
(``X_cam = R X + t``).  Lower feature levels are stride-2 subsamplings, so a
level with scale ``s`` simply uses ``K`` with its first two rows times ``s``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adcore as ad

ORTHO_TOL = 1e-9
INF_EPIPOLE_TOL = 1e-12


class EpipoleUndefined(ValueError):
    """Raised when two cameras share a center."""


@dataclass
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.d_min = float(self.d_min)
        self.d_max = float(self.d_max)
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(self.R) - 1) > ORTHO_TOL:
            raise ValueError("R must be a rotation (orthonormal, det +1)")
        if np.abs(np.tril(self.K, -1)).max() > 0 or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must be upper-triangular with positive focal lengths")
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def depth_interval(self) -> float:
        """Base hypothesis spacing ``(d_max - d_min) / 48``."""
        return (self.d_max - self.d_min) / 48.0

    def scaled(self, s: float) -> "Camera":
        K = self.K.copy()
        K[:2] *= s
        return Camera(K, self.R, self.t, self.d_min, self.d_max)

    def at_level(self, level: int) -> "Camera":
        """Camera for cascade level ``level`` (resolution ``2**-(3 - level)``)."""
        return self.scaled(2.0 ** -(3 - level))


def relative_pose(cam_ref: Camera, cam_src: Camera) -> tuple[np.ndarray, np.ndarray]:
    r_rel = cam_src.R @ cam_ref.R.T
    t_rel = cam_src.t - r_rel @ cam_ref.t
    return r_rel, t_rel


def epipole(cam_ref: Camera, cam_src: Camera) -> np.ndarray:
    """Homogeneous image of the source center in the reference view."""
    baseline = cam_src.center - cam_ref.center
    if np.linalg.norm(baseline) < 1e-12:
        raise EpipoleUndefined("camera centers coincide")
    return cam_ref.K @ cam_ref.R @ baseline


def scale_epipole(e: np.ndarray, s: float) -> np.ndarray:
    """Epipole for a level whose intrinsics were scaled by ``s``."""
    return np.array([e[0] * s, e[1] * s, e[2]])


def epipole_at_infinity(e: np.ndarray) -> bool:
    return abs(e[2]) < INF_EPIPOLE_TOL * np.linalg.norm(e)


@dataclass
class EpipolarField:
    omega: np.ndarray  # [2, H, W] unit (u, v)
    valid: np.ndarray  # [H, W] bool

    @property
    def u(self) -> np.ndarray:
        return self.omega[0]

    @property
    def v(self) -> np.ndarray:
        return self.omega[1]


def pixel_grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def epipolar_direction_field(e: np.ndarray, h: int, w: int) -> EpipolarField:
    """Unit direction from every pixel toward the epipole.

    Pixels closer than one pixel to a finite epipole are flagged invalid and
    get the fallback direction ``[1, 0]``.
    """
    e = np.asarray(e, dtype=np.float64)
    if epipole_at_infinity(e):
        d = e[:2] / np.linalg.norm(e[:2])
        omega = np.broadcast_to(d[:, None, None], (2, h, w)).copy()
        return EpipolarField(omega, np.ones((h, w), dtype=bool))
    xs, ys = pixel_grid(h, w)
    dx = e[0] / e[2] - xs
    dy = e[1] / e[2] - ys
    norm = np.hypot(dx, dy)
    valid = norm >= 1.0
    safe = np.where(valid, norm, 1.0)
    omega = np.stack([np.where(valid, dx / safe, 1.0), np.where(valid, dy / safe, 0.0)])
    return EpipolarField(omega, valid)


def plane_sweep_homography(cam_ref: Camera, cam_src: Camera, d: float) -> np.ndarray:
    """Reference-to-source pixel map induced by the plane ``z_ref = d``."""
    if not d > 0:
        raise ValueError(f"plane depth must be positive, got {d}")
    r_rel, t_rel = relative_pose(cam_ref, cam_src)
    n = np.array([0.0, 0.0, 1.0])
    return cam_src.K @ (r_rel + np.outer(t_rel, n) / d) @ np.linalg.inv(cam_ref.K)


def warp_coords(cam_ref: Camera, cam_src: Camera, depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Source pixel coordinates of reference pixels placed at ``depth[..., H, W]``.

    Per-pixel equivalent of applying :func:`plane_sweep_homography` at each
    pixel's own depth.

    Returns:
        ``coords[2, ..., H, W]`` and the source-frame depth ``[..., H, W]``.
    """
    h, w = depth.shape[-2:]
    xs, ys = pixel_grid(h, w)
    rays = np.linalg.inv(cam_ref.K) @ np.stack([xs, ys, np.ones_like(xs)]).reshape(3, -1)
    r_rel, t_rel = relative_pose(cam_ref, cam_src)
    m = cam_src.K @ r_rel @ rays  # [3, HW]
    kt = cam_src.K @ t_rel
    flat_d = depth.reshape(-1, h * w)
    p = m[:, None, :] * flat_d[None] + kt[:, None, None]  # [3, N, HW]
    z = p[2]
    zs = np.where(np.abs(z) > 1e-12, z, 1e-12)
    coords = np.stack([p[0] / zs, p[1] / zs])
    coords = np.where(z[None] > 0, coords, -1e6)
    shape = depth.shape
    return coords.reshape((2,) + shape), z.reshape(shape)


@dataclass
class DepthHypotheses:
    values: np.ndarray  # [D, H, W], strictly increasing along D
    stage: int

    @property
    def n_planes(self) -> int:
        return self.values.shape[0]


def warp_feature(f_src, cam_ref: Camera, cam_src: Camera, hyps: DepthHypotheses):
    """Warp source features onto every depth hypothesis of the reference view.

    Returns:
        ``(warped[D, C, H, W], valid[D, H, W])``; out-of-view samples are 0.
    """
    f_src = ad.as_tensor(f_src)
    c, hs, ws = f_src.shape
    coords, _ = warp_coords(cam_ref, cam_src, hyps.values)
    valid = ad.sample_validity(coords, hs, ws)
    sampled = ad.grid_sample_bilinear(f_src, coords)  # [C, D, H, W]
    return ad.transpose(sampled, (1, 0, 2, 3)), valid


@dataclass(frozen=True)
class HypothesisConfig:
    planes: tuple[int, ...] = (48, 32, 8)
    interval_scales: tuple[float, ...] = (4.0, 2.0, 1.0)
    base_planes: int = 48


def _upsample_depth(depth: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return ad.upsample_bilinear(depth[None]).data[0]


def depth_hypotheses(stage: int, prev_depth: np.ndarray | None, cam_ref: Camera,
                     config: HypothesisConfig = HypothesisConfig(),
                     shape: tuple[int, int] | None = None) -> DepthHypotheses:
    """Per-pixel depth samples for one cascade stage.

    Stage 0 spans ``[d_min, d_max]`` uniformly.  Later stages center
    ``planes[stage]`` samples on the ×2-upsampled previous depth with spacing
    ``interval_scales[stage]`` times the base interval, then shift each
    pixel's set to stay inside ``[d_min / 2, 2 d_max]``.
    """
    if stage not in (0, 1, 2):
        raise ValueError(f"stage must be 0, 1 or 2, got {stage}")
    n = config.planes[stage]
    lo_d, hi_d = cam_ref.d_min, cam_ref.d_max
    if stage == 0:
        if shape is None:
            if prev_depth is None:
                raise ValueError("stage 0 needs the output shape")
            shape = prev_depth.shape
        vals = np.linspace(lo_d, hi_d, n)
        vals[0], vals[-1] = lo_d, hi_d
        return DepthHypotheses(np.broadcast_to(vals[:, None, None], (n,) + tuple(shape)).copy(), 0)
    if prev_depth is None:
        raise ValueError(f"stage {stage} needs the previous stage's depth")
    center = _upsample_depth(np.asarray(prev_depth, dtype=np.float64))
    base = (hi_d - lo_d) / config.base_planes
    step = config.interval_scales[stage] * base
    offsets = (np.arange(n) - (n - 1) / 2.0) * step
    vals = center[None] + offsets[:, None, None]
    lo, hi = lo_d / 2.0, 2.0 * hi_d
    span = offsets[-1] - offsets[0]
    if span >= hi - lo:
        vals = np.broadcast_to(np.linspace(lo, hi, n)[:, None, None], vals.shape).copy()
    else:
        shift = np.maximum(lo - vals[0], 0.0) - np.maximum(vals[-1] - hi, 0.0)
        vals = vals + shift[None]
    return DepthHypotheses(vals, stage)


def project(points: np.ndarray, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """World points ``[..., 3]`` to pixels ``[..., 2]`` and camera depth ``[...]``."""
    pc = points @ cam.R.T + cam.t
    z = pc[..., 2]
    uvw = pc @ cam.K.T
    return uvw[..., :2] / z[..., None], z


def unproject(pixels: np.ndarray, depth: np.ndarray, cam: Camera) -> np.ndarray:
    """Pixels ``[..., 2]`` at camera depth ``[...]`` to world points ``[..., 3]``."""
    homo = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    rays = homo @ np.linalg.inv(cam.K).T
    pc = rays * np.asarray(depth)[..., None]
    return (pc - cam.t) @ cam.R


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera ``R, t`` for a camera at ``center`` looking at ``target``.

    Image ``y`` grows downward, so the default world up is ``-y``.
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center
