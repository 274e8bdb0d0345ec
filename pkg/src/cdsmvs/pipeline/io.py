"""File formats and the on-disk dataset layout.

A scene directory holds::

    images/NNNN.png        8-bit RGB
    cams/NNNN_cam.txt      extrinsic, intrinsic and depth range
    depths/NNNN.pfm        optional ground truth (0 = no depth)
    pair.txt               ordered source views per reference

A dataset root is either one scene directory or a directory of them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import Camera
from .fusion import PointCloud

CAM_DIGITS = 12


class FormatError(ValueError):
    pass


# -------------------------------------------------------------------- PFM

def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM; ``[H, W]`` as "Pf", ``[H, W, 3]`` as "PF"."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM holds [H, W] or [H, W, 3], got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", buf)
    if m is None:
        raise FormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    payload = buf[m.end():]
    if len(payload) < 4 * count:
        raise FormatError(f"{path}: truncated payload")
    arr = np.frombuffer(payload, dtype=dtype, count=count)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))[::-1]
    return np.ascontiguousarray(arr.astype(np.float32))


# -------------------------------------------------------------------- PNG

def write_png(path, image: np.ndarray) -> None:
    """``[3, H, W]`` or ``[H, W]`` floats in ``[0, 1]`` as 8-bit PNG."""
    image = np.asarray(image, dtype=np.float64)
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    if q.ndim == 3:
        q = np.transpose(q, (1, 2, 0))
    Image.fromarray(q).save(path)


def read_png(path) -> np.ndarray:
    """RGB ``[3, H, W]`` in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


# ---------------------------------------------------------------- cam.txt

def format_cam(cam: Camera) -> str:
    g = f"{{:.{CAM_DIGITS}g}}"
    E = np.eye(4)
    E[:3, :3], E[:3, 3] = cam.R, cam.t
    lines = ["extrinsic"] + [" ".join(g.format(v) for v in row) for row in E]
    lines += ["", "intrinsic"] + [" ".join(g.format(v) for v in row) for row in cam.K]
    lines += ["", " ".join(g.format(v) for v in (cam.d_min, cam.depth_interval)) + f" 48 {g.format(cam.d_max)}"]
    return "\n".join(lines) + "\n"


def parse_cam(text: str) -> Camera:
    """Extrinsic 4x4, intrinsic 3x3, then ``d_min interval [n d_max]``."""
    words = text.split()
    try:
        e = words.index("extrinsic")
        k = words.index("intrinsic")
        E = np.array([float(v) for v in words[e + 1:e + 17]]).reshape(4, 4)
        K = np.array([float(v) for v in words[k + 1:k + 10]]).reshape(3, 3)
        rng = [float(v) for v in words[k + 10:]]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"malformed cam.txt: {exc}") from exc
    if len(rng) < 2:
        raise FormatError("cam.txt lacks the depth range line")
    d_min, interval = rng[0], rng[1]
    d_max = rng[3] if len(rng) >= 4 else d_min + interval * (rng[2] if len(rng) >= 3 else 48)
    return Camera(K, E[:3, :3], E[:3, 3], d_min, d_max)


def write_cam(path, cam: Camera) -> None:
    Path(path).write_text(format_cam(cam))


def read_cam(path) -> Camera:
    return parse_cam(Path(path).read_text())


# --------------------------------------------------------------- pair.txt

def write_pairs(path, pairs: list[list[int]], scores: list[list[float]] | None = None) -> None:
    lines = [str(len(pairs))]
    for ref, srcs in enumerate(pairs):
        sc = scores[ref] if scores is not None else [1.0] * len(srcs)
        lines.append(str(ref))
        lines.append(" ".join([str(len(srcs))] + [f"{s} {v:.6g}" for s, v in zip(srcs, sc)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pairs(path) -> list[list[int]]:
    words = Path(path).read_text().split()
    try:
        n = int(words[0])
        pos, pairs = 1, [[] for _ in range(n)]
        for _ in range(n):
            ref, count = int(words[pos]), int(words[pos + 1])
            pos += 2
            pairs[ref] = [int(words[pos + 2 * i]) for i in range(count)]
            pos += 2 * count
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed pair file") from exc
    return pairs


# -------------------------------------------------------------------- PLY

def write_ply(path, cloud: PointCloud) -> None:
    col = np.clip(np.rint(cloud.colors * 255), 0, 255).astype(np.int64)
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    rows = [f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(cloud.points, col)]
    Path(path).write_text("\n".join(header + rows) + "\n")


def read_ply(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    try:
        end = lines.index("end_header")
    except ValueError as exc:
        raise FormatError(f"{path}: missing end_header") from exc
    n = None
    for line in lines[:end]:
        if line.startswith("element vertex"):
            n = int(line.split()[2])
    if n is None or lines[0] != "ply":
        raise FormatError(f"{path}: not an ascii PLY point cloud")
    body = lines[end + 1:end + 1 + n]
    data = np.array([[float(v) for v in row.split()[:6]] for row in body]).reshape(-1, 6)
    return PointCloud(data[:, :3], data[:, 3:] / 255.0)


# ---------------------------------------------------------------- dataset

@dataclass
class SceneData:
    root: Path
    images: list[np.ndarray]
    cams: list[Camera]
    depths: list[np.ndarray] | None
    pairs: list[list[int]]

    @property
    def n_views(self) -> int:
        return len(self.images)


def default_pairs(cams: list[Camera]) -> list[list[int]]:
    """Sources ordered by camera-center distance, ties by index."""
    centers = np.array([c.center for c in cams])
    out = []
    for r in range(len(cams)):
        d = np.linalg.norm(centers - centers[r], axis=1)
        out.append([int(i) for i in sorted(range(len(cams)), key=lambda i: (round(d[i], 9), i)) if i != r])
    return out


def write_scene_dir(root, images, cams, depths=None, pairs=None) -> Path:
    root = Path(root)
    for sub in ("images", "cams") + (("depths",) if depths is not None else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, (img, cam) in enumerate(zip(images, cams)):
        write_png(root / "images" / f"{i:04d}.png", img)
        write_cam(root / "cams" / f"{i:04d}_cam.txt", cam)
        if depths is not None:
            write_pfm(root / "depths" / f"{i:04d}.pfm", depths[i])
    write_pairs(root / "pair.txt", pairs if pairs is not None else default_pairs(cams))
    return root


def write_synthetic_scene(root, scene) -> Path:
    depths = [np.where(v.mask, v.depth, 0.0) for v in scene.views]
    return write_scene_dir(root, [v.image for v in scene.views], scene.cams, depths)


def read_scene_dir(root) -> SceneData:
    root = Path(root)
    if not (root / "pair.txt").exists():
        raise FormatError(f"{root}: no pair.txt, not a scene directory")
    image_files = sorted((root / "images").glob("*.png"))
    if not image_files:
        raise FormatError(f"{root}: no images")
    ids = [p.stem for p in image_files]
    if ids != [f"{i:04d}" for i in range(len(ids))]:
        raise FormatError(f"{root}: image indices are not contiguous from 0000")
    images = [read_png(p) for p in image_files]
    cams = []
    for i in ids:
        path = root / "cams" / f"{i}_cam.txt"
        if not path.exists():
            raise FormatError(f"{root}: missing {path.name}")
        cams.append(read_cam(path))
    depth_files = [root / "depths" / f"{i}.pfm" for i in ids]
    depths = None
    if all(p.exists() for p in depth_files):
        depths = [read_pfm(p).astype(np.float64) for p in depth_files]
    pairs = read_pairs(root / "pair.txt")
    if len(pairs) != len(images) or any(s >= len(images) for p in pairs for s in p):
        raise FormatError(f"{root}: pair.txt does not match the image count")
    return SceneData(root, images, cams, depths, pairs)


def scene_dirs(root) -> list[Path]:
    """``root`` itself if it is a scene directory, else its scene subdirectories."""
    root = Path(root)
    if (root / "pair.txt").exists():
        return [root]
    found = sorted(p for p in root.iterdir() if p.is_dir() and (p / "pair.txt").exists()) if root.is_dir() else []
    if not found:
        raise FormatError(f"{root}: no scene directories found")
    return found


def scene_samples(data: SceneData, refs: list[int] | None = None, n_src: int = 2) -> list:
    """Training samples from a scene directory with GT depths.

    Each reference uses the first ``n_src`` sources from pair.txt, in order;
    pixels with depth 0 are unsupervised.
    """
    from ..training import make_sample

    if data.depths is None:
        raise FormatError(f"{data.root}: no GT depths to train on")
    refs = list(range(data.n_views)) if refs is None else refs
    out = []
    for r in refs:
        srcs = data.pairs[r][:n_src]
        if not srcs:
            raise FormatError(f"{data.root}: view {r} has no source views")
        d = data.depths[r]
        out.append(make_sample(data.images, data.cams, d, d > 0, ref=r, srcs=srcs))
    return out
