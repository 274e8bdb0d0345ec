"""Procedural multi-view scenes with exact depth.

Scenes are unions of analytic primitives (planes, rectangles, spheres,
boxes) carrying solid 3D textures.  Every pixel is rendered by casting its
ray against the primitives, so depth, normals and colors are exact.  Ray
directions are ``R^T K^-1 [x, y, 1]``, which makes the ray parameter equal to
the camera-frame depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Camera, look_at, pixel_grid, project, unproject

LAYOUTS = ("plane", "two_planes", "sphere_on_plane", "textured_box", "half_card")
TEXTURES = ("checker", "perlin", "flat", "half")
GRAZING_COS = 0.1


# ---------------------------------------------------------------- textures

class PerlinNoise:
    """Improved 3D gradient noise with a seeded permutation table."""

    _GRADS = np.array([[1, 1, 0], [-1, 1, 0], [1, -1, 0], [-1, -1, 0],
                       [1, 0, 1], [-1, 0, 1], [1, 0, -1], [-1, 0, -1],
                       [0, 1, 1], [0, -1, 1], [0, 1, -1], [0, -1, -1],
                       [1, 1, 0], [-1, 1, 0], [0, -1, 1], [0, -1, -1]], dtype=np.float64)

    def __init__(self, rng: np.random.Generator):
        p = rng.permutation(256)
        self.perm = np.concatenate([p, p])

    @staticmethod
    def _fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        """Noise at ``pts[..., 3]``, roughly in ``[-1, 1]``."""
        cell = np.floor(pts)
        f = pts - cell
        ci = cell.astype(np.int64) & 255
        u = self._fade(f)
        perm = self.perm
        out = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    h = perm[perm[perm[ci[..., 0] + dx] + ci[..., 1] + dy] + ci[..., 2] + dz] & 15
                    g = self._GRADS[h]
                    d = f - np.array([dx, dy, dz], dtype=np.float64)
                    dot = (g * d).sum(axis=-1)
                    wx = u[..., 0] if dx else 1 - u[..., 0]
                    wy = u[..., 1] if dy else 1 - u[..., 1]
                    wz = u[..., 2] if dz else 1 - u[..., 2]
                    out = out + wx * wy * wz * dot
        return out


@dataclass
class Texture:
    """Solid texture: color as a function of world position."""

    kind: str
    freq: float
    colors: np.ndarray  # [2, 3] base colors
    noise: PerlinNoise | None = None
    octaves: int = 3
    split_x: float = 0.0  # "half": textured where x < split_x

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        """Colors ``[..., 3]`` in ``[0, 1]`` at points ``[..., 3]``."""
        if self.kind == "flat":
            return np.broadcast_to(self.colors[0], pts.shape).copy()
        if self.kind == "checker":
            parity = np.floor(pts * self.freq).astype(np.int64).sum(axis=-1) & 1
            return self.colors[parity]
        if self.kind in ("perlin", "half"):
            tex = self._noise_color(pts)
            if self.kind == "half":
                flat = np.broadcast_to(self.colors[0], pts.shape)
                tex = np.where((pts[..., 0] < self.split_x)[..., None], tex, flat)
            return tex
        raise ValueError(f"unknown texture {self.kind!r}")

    def _noise_color(self, pts):
        acc = np.zeros(pts.shape[:-1])
        amp, norm = 1.0, 0.0
        for o in range(self.octaves):
            acc = acc + amp * self.noise(pts * self.freq * 2 ** o + 17.3 * o)
            norm += amp
            amp *= 0.5
        s = np.clip(0.5 + 0.9 * acc / norm, 0.0, 1.0)[..., None]
        # a second, offset field varies hue so channels are not all identical
        hue = np.clip(0.5 + 0.9 * self.noise(pts * self.freq * 0.7 + 101.0), 0.0, 1.0)[..., None]
        mix = self.colors[0] * (1 - hue) + self.colors[1] * hue
        return np.clip(s * mix * 1.6, 0.0, 1.0)


def make_texture(kind: str, rng: np.random.Generator, freq: float = 4.0, octaves: int = 3) -> Texture:
    if kind not in TEXTURES:
        raise ValueError(f"texture must be one of {TEXTURES}, got {kind!r}")
    colors = rng.uniform(0.25, 0.9, size=(2, 3))
    noise = PerlinNoise(rng) if kind in ("perlin", "half") else None
    return Texture(kind, freq, colors, noise, octaves)


# -------------------------------------------------------------- primitives

@dataclass
class Hit:
    t: np.ndarray  # [N] ray parameter = camera depth; inf for misses
    normal: np.ndarray  # [N, 3] unit normals (world)
    part: np.ndarray | int = 0  # face index for piecewise primitives


class Primitive:
    texture: Texture

    def intersect(self, o: np.ndarray, d: np.ndarray) -> Hit:
        raise NotImplementedError


@dataclass
class Rect(Primitive):
    """Plane through ``center`` spanned by unit ``axes[0], axes[1]``.

    ``half`` gives the half-extents along the axes (``inf`` = unbounded).
    """

    center: np.ndarray
    axes: np.ndarray  # [2, 3]
    half: tuple[float, float]
    texture: Texture

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.axes[0], self.axes[1])
        return n / np.linalg.norm(n)

    def intersect(self, o, d):
        n = self.normal
        denom = d @ n
        safe = np.where(np.abs(denom) > 1e-15, denom, 1e-15)
        t = ((self.center - o) @ n) / safe
        p = o + t[:, None] * d
        rel = p - self.center
        inside = (np.abs(rel @ self.axes[0]) <= self.half[0]) & (np.abs(rel @ self.axes[1]) <= self.half[1])
        ok = (t > 1e-9) & inside & (np.abs(denom) > 1e-15)
        return Hit(np.where(ok, t, np.inf), np.broadcast_to(n, d.shape))


@dataclass
class Sphere(Primitive):
    center: np.ndarray
    radius: float
    texture: Texture

    def intersect(self, o, d):
        oc = o - self.center
        a = (d * d).sum(axis=1)
        b = 2 * (d @ oc) if oc.ndim == 1 else 2 * (d * oc).sum(axis=1)
        c = oc @ oc - self.radius ** 2
        disc = b * b - 4 * a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        ok = (disc >= 0) & (t > 1e-9)
        t = np.where(ok, t, np.inf)
        p = o + np.where(ok, t, 0.0)[:, None] * d
        nrm = (p - self.center) / self.radius
        return Hit(t, nrm)


@dataclass
class Box(Primitive):
    center: np.ndarray
    rotation: np.ndarray  # box-to-world
    half: np.ndarray  # [3]
    texture: Texture

    def intersect(self, o, d):
        ob = (o - self.center) @ self.rotation
        db = d @ self.rotation
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / db
            t1 = (-self.half - ob) * inv
            t2 = (self.half - ob) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        t_near = tmin.max(axis=1)
        t_far = tmax.min(axis=1)
        ok = (t_near <= t_far) & (t_near > 1e-9)
        axis = tmin.argmax(axis=1)
        sign = -np.sign(db[np.arange(len(db)), axis])
        nb = np.zeros_like(db)
        nb[np.arange(len(db)), axis] = sign
        part = axis * 2 + (sign > 0)
        return Hit(np.where(ok, t_near, np.inf), nb @ self.rotation.T, part)


def cast(prims: list[Primitive], o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit over ``prims``: ``(t[N], normal[N, 3], surface id[N])``.

    The surface id is ``8 * primitive index + face``; misses get -1.
    """
    best_t = np.full(d.shape[0], np.inf)
    best_n = np.zeros(d.shape)
    best_i = np.full(d.shape[0], -1)
    for i, prim in enumerate(prims):
        hit = prim.intersect(o, d)
        closer = hit.t < best_t
        best_t = np.where(closer, hit.t, best_t)
        best_n = np.where(closer[:, None], hit.normal, best_n)
        best_i = np.where(closer, 8 * i + hit.part, best_i)
    return best_t, best_n, best_i


def pixel_rays(cam: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World ray origin and directions ``[N, 3]`` whose parameter is camera depth."""
    homo = np.concatenate([pixels, np.ones((pixels.shape[0], 1))], axis=1)
    d = homo @ np.linalg.inv(cam.K).T @ cam.R
    return cam.center, d


# ------------------------------------------------------------------ scenes

@dataclass(frozen=True)
class SceneSpec:
    layout: str = "sphere_on_plane"
    texture: str = "perlin"
    texture_freq: float = 4.0
    octaves: int = 3
    n_views: int = 3
    baseline: float = 0.7
    resolution: tuple[int, int] = (128, 128)
    distance: float = 4.0  # reference camera to scene center
    depth_range: tuple[float, float] | None = None  # default distance -/+ 1.5
    focal: float | None = None  # pixels; default image width
    rig: str = "arc"
    noise_sigma: float = 0.0
    seed: int = 0

    def resolved_depth_range(self) -> tuple[float, float]:
        if self.depth_range is not None:
            return tuple(float(v) for v in self.depth_range)
        return self.distance - 1.5, self.distance + 1.5


@dataclass
class SceneView:
    image: np.ndarray  # [3, H, W] float64 in [0, 1]
    cam: Camera
    depth: np.ndarray  # [H, W]
    mask: np.ndarray  # [H, W] bool


@dataclass
class Scene:
    spec: SceneSpec
    views: list[SceneView]
    prims: list[Primitive] = field(default_factory=list)

    @property
    def cams(self) -> list[Camera]:
        return [v.cam for v in self.views]


def view_offsets(n: int) -> list[int]:
    """Rig slot of each view: 0, -1, +1, -2, +2, ..."""
    out = [0]
    k = 1
    while len(out) < n:
        out.append(-k)
        if len(out) < n:
            out.append(k)
        k += 1
    return out


def make_cameras(spec: SceneSpec) -> list[Camera]:
    h, w = spec.resolution
    f = float(spec.focal if spec.focal is not None else w)
    K = np.array([[f, 0, (w - 1) / 2], [0, f, (h - 1) / 2], [0, 0, 1.0]])
    d_min, d_max = spec.resolved_depth_range()
    target = np.array([0.0, 0.0, spec.distance])
    cams = []
    for k in view_offsets(spec.n_views):
        if spec.rig == "arc":
            theta = k * spec.baseline / spec.distance
            center = target + spec.distance * np.array([np.sin(theta), 0.0, -np.cos(theta)])
            R, t = look_at(center, target)
            if k == 0:
                R, t = np.eye(3), np.zeros(3)
        elif spec.rig == "linear":
            R, t = np.eye(3), -np.array([k * spec.baseline, 0.0, 0.0])
        else:
            raise ValueError(f"rig must be 'arc' or 'linear', got {spec.rig!r}")
        cams.append(Camera(K, R, t, d_min, d_max))
    return cams


def build_primitives(spec: SceneSpec, rng: np.random.Generator) -> list[Primitive]:
    D = spec.distance
    ex, ey, ez = np.eye(3)
    unbounded = (np.inf, np.inf)

    def tex(kind=None):
        return make_texture(kind or spec.texture, rng, spec.texture_freq, spec.octaves)

    if spec.layout == "plane":
        return [Rect(np.array([0.0, 0.0, D]), np.stack([ex, ey]), unbounded, tex())]
    if spec.layout == "half_card":
        card = tex("half")
        return [Rect(np.array([0.0, 0.0, D]), np.stack([ex, ey]), unbounded, card)]
    back_z = D + rng.uniform(0.5, 1.0)
    tilt = rng.uniform(-0.15, 0.15)
    back_axes = np.stack([np.array([np.cos(tilt), 0.0, np.sin(tilt)]), ey])
    back = Rect(np.array([0.0, 0.0, back_z]), back_axes, unbounded, tex())
    if spec.layout == "two_planes":
        c = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), D - rng.uniform(0.2, 0.8)])
        a = rng.uniform(-0.4, 0.4)
        axes = np.stack([np.array([np.cos(a), 0.0, np.sin(a)]), ey])
        front = Rect(c, axes, (rng.uniform(0.4, 0.9), rng.uniform(0.4, 0.9)), tex())
        return [back, front]
    if spec.layout == "sphere_on_plane":
        r = rng.uniform(0.4, 0.7)
        c = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), back_z - r - rng.uniform(0.0, 0.3)])
        return [back, Sphere(c, r, tex())]
    if spec.layout == "textured_box":
        a = rng.uniform(-0.6, 0.6)
        rot = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
        half = rng.uniform(0.3, 0.6, size=3)
        c = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), D - rng.uniform(0.0, 0.4)])
        return [back, Box(c, rot, half, tex())]
    raise ValueError(f"layout must be one of {LAYOUTS}, got {spec.layout!r}")


def render_view(prims: list[Primitive], cam: Camera, h: int, w: int,
                noise_sigma: float = 0.0, rng: np.random.Generator | None = None) -> SceneView:
    xs, ys = pixel_grid(h, w)
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
    o, d = pixel_rays(cam, pix)
    t, _, idx = cast(prims, o, d)
    mask = np.isfinite(t)
    img = np.zeros((h * w, 3))
    pts = o + np.where(mask, t, 0.0)[:, None] * d
    for i, prim in enumerate(prims):
        sel = idx // 8 == i
        if sel.any():
            img[sel] = prim.texture(pts[sel])
    if noise_sigma > 0:
        img = np.clip(img + rng.normal(scale=noise_sigma, size=img.shape), 0.0, 1.0)
    depth = np.where(mask, t, 0.0).reshape(h, w)
    return SceneView(img.T.reshape(3, h, w), cam, depth, mask.reshape(h, w))


def generate_scene(spec: SceneSpec) -> Scene:
    """Render every view of ``spec``; fully determined by ``spec.seed``."""
    h, w = spec.resolution
    if spec.n_views < 2:
        raise ValueError("a scene needs at least two views")
    if h % 8 or w % 8:
        raise ValueError(f"resolution {h}x{w} must be divisible by 8")
    if spec.baseline == 0:
        raise ValueError("baseline 0 gives coincident cameras")
    rng = np.random.default_rng(spec.seed)
    prims = build_primitives(spec, rng)
    cams = make_cameras(spec)
    noise_rng = np.random.default_rng([spec.seed, 1])
    views = [render_view(prims, cam, h, w, spec.noise_sigma, noise_rng) for cam in cams]
    return Scene(spec, views, prims)


def _view_points(scene: Scene, i: int, stride: int = 1):
    """Pixels, lifted points and camera-facing normals of view ``i``."""
    vi = scene.views[i]
    h, w = vi.depth.shape
    xs, ys = pixel_grid(h, w)
    sel = np.zeros((h, w), dtype=bool)
    sel[::stride, ::stride] = vi.mask[::stride, ::stride]
    pix = np.stack([xs[sel], ys[sel]], axis=1)
    pts = unproject(pix, vi.depth[sel], vi.cam)
    o_i, d_i = pixel_rays(vi.cam, pix)
    _, nrm, surf = cast(scene.prims, o_i, d_i)
    nrm = nrm * -np.sign((nrm * d_i).sum(axis=1, keepdims=True))  # toward camera i
    return sel, pts, nrm, surf


def _seen_from(scene: Scene, j: int, pts, nrm, surf) -> tuple[np.ndarray, np.ndarray]:
    """Which points view ``j`` sees, and their re-cast depth residuals there.

    A point is skipped when it projects outside the image, is seen at a
    grazing angle, or is occluded: the re-cast lands on a different surface
    or the point faces away (primitives are convex).
    """
    vj = scene.views[j]
    h, w = vj.depth.shape
    q, z = project(pts, vj.cam)
    seen = (z > 0) & (q[:, 0] >= 0) & (q[:, 0] <= w - 1) & (q[:, 1] >= 0) & (q[:, 1] <= h - 1)
    resid = np.full(len(pts), np.nan)
    idx = np.nonzero(seen)[0]
    if idx.size:
        o, d = pixel_rays(vj.cam, q[idx])
        t, _, surf_j = cast(scene.prims, o, d)
        dn = d / np.linalg.norm(d, axis=1, keepdims=True)
        facing = -(nrm[idx] * dn).sum(axis=1)
        ok = (np.abs(facing) >= GRAZING_COS) & (surf_j == surf[idx]) & (facing > 0)
        seen[idx[~ok]] = False
        resid[idx[ok]] = np.abs(t[ok] - z[idx[ok]])
    return seen, resid


def cross_view_consistency_check(scene: Scene, stride: int = 1) -> float:
    """Largest depth disagreement over all ordered view pairs.

    Each view's stored depth is lifted to 3D, projected into the other
    view and compared to an analytic re-cast from that camera; points that
    view does not see are skipped.
    """
    worst = 0.0
    for i in range(len(scene.views)):
        _, pts, nrm, surf = _view_points(scene, i, stride)
        for j in range(len(scene.views)):
            if i != j:
                seen, resid = _seen_from(scene, j, pts, nrm, surf)
                if seen.any():
                    worst = max(worst, float(resid[seen].max()))
    return worst


def covisibility(scene: Scene) -> list[np.ndarray]:
    """Per view, the number of other views that see each pixel's surface point."""
    out = []
    for i, v in enumerate(scene.views):
        sel, pts, nrm, surf = _view_points(scene, i)
        count = np.zeros(len(pts), dtype=np.int64)
        for j in range(len(scene.views)):
            if i != j:
                count += _seen_from(scene, j, pts, nrm, surf)[0]
        full = np.zeros(v.depth.shape, dtype=np.int64)
        full[sel] = count
        out.append(full)
    return out


def surface_points(scene: Scene, views: list[int] | None = None, supersample: int = 1) -> np.ndarray:
    """Analytic surface samples along pixel rays of the given views ``[N, 3]``."""
    out = []
    for i in views if views is not None else range(len(scene.views)):
        cam = scene.views[i].cam
        h, w = scene.views[i].depth.shape
        s = supersample
        ys, xs = np.mgrid[0:h * s, 0:w * s].astype(np.float64) / s
        pix = np.stack([xs.ravel(), ys.ravel()], axis=1)
        o, d = pixel_rays(cam, pix)
        t, _, _ = cast(scene.prims, o, d)
        ok = np.isfinite(t)
        out.append(o + t[ok, None] * d[ok])
    return np.concatenate(out)


def perturb_camera(scene: Scene, index: int, dt: np.ndarray) -> Scene:
    """Copy of ``scene`` whose camera ``index`` has ``t`` shifted by ``dt``."""
    views = list(scene.views)
    v = views[index]
    cam = v.cam
    views[index] = replace(v, cam=Camera(cam.K, cam.R, cam.t + np.asarray(dt, dtype=np.float64), cam.d_min, cam.d_max))
    return Scene(scene.spec, views, scene.prims)


TRAIN_LAYOUTS = ("two_planes", "sphere_on_plane", "textured_box")


def toy_specs(n: int, base_seed: int = 0, **overrides) -> list[SceneSpec]:
    """The toy training distribution: cycling layouts, multi-octave noise texture."""
    kw = dict(texture="perlin", texture_freq=1.5, octaves=4, baseline=2.0, n_views=3)
    kw.update(overrides)
    return [SceneSpec(layout=TRAIN_LAYOUTS[i % len(TRAIN_LAYOUTS)], seed=base_seed + i, **kw) for i in range(n)]
