"""Datasets: Blender-synthetic layout, two-plane light-field grids, procedural
oracle scenes, and image / depth-map I/O."""

from __future__ import annotations

import json
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from halo.fields import SceneBounds

# ---------------------------------------------------------------------------
# image I/O

DEPTH_MAGIC = b"HALODMAP"
DEPTH_VERSION = 1


def write_png(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q).save(path)


def read_png(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Float32 RGB in [0, 1]; any alpha channel is composited over ``background``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im, dtype=np.float32) / 255.0
            mode = im.mode
    except OSError as exc:
        raise ValueError(f"corrupt image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    if mode in ("RGBA", "LA") or arr.shape[-1] == 4:
        rgb, a = arr[..., :3], arr[..., 3:4]
        arr = rgb * a + np.asarray(background, dtype=np.float32) * (1.0 - a)
    return arr[..., :3].astype(np.float32)


def write_depth_map(path, data, channels: Sequence[str] = ("depth",)) -> None:
    """Flat little-endian float32 sidecar: magic, version, H, W, C, channel names, payload."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[..., None]
    h, w, c = data.shape
    if len(channels) != c:
        raise ValueError(f"{c} channels but {len(channels)} names")
    names = ",".join(channels).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<IIIII", DEPTH_VERSION, h, w, c, len(names)))
        f.write(names)
        f.write(np.ascontiguousarray(data).tobytes())


def read_depth_map(path):
    """Returns ``(array (H, W, C) float32, channel names)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such depth map: {path}")
    raw = path.read_bytes()
    if raw[:8] != DEPTH_MAGIC or len(raw) < 28:
        raise ValueError(f"corrupt depth map {path}: bad header")
    version, h, w, c, n = struct.unpack("<IIIII", raw[8:28])
    if version != DEPTH_VERSION:
        raise ValueError(f"unsupported depth map version {version}")
    names = raw[28:28 + n].decode().split(",")
    payload = raw[28 + n:]
    if len(payload) != h * w * c * 4:
        raise ValueError(f"corrupt depth map {path}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy(), names


# ---------------------------------------------------------------------------
# posed image sets


@dataclass
class PosedImageSet:
    images: np.ndarray  # (N, H, W, 3) float32
    poses: np.ndarray  # (N, 4, 4) float64
    camera_angle_x: float
    bounds: SceneBounds
    names: list
    splits: list
    depths: Optional[np.ndarray] = None  # (N, H, W), inf where the ray misses

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.poses) == len(self.names) == len(self.splits) == n):
            raise ValueError("image, pose, name and split counts disagree")
        if n and len({im.shape for im in self.images}) != 1:
            raise ValueError("all images must share one size")

    def __len__(self):
        return len(self.images)

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def subset(self, split: str) -> "PosedImageSet":
        idx = [i for i, s in enumerate(self.splits) if s == split]
        return PosedImageSet(
            self.images[idx], self.poses[idx], self.camera_angle_x, self.bounds,
            [self.names[i] for i in idx], [self.splits[i] for i in idx],
            None if self.depths is None else self.depths[idx],
        )


def check_pose_rigid(pose, atol=1e-6):
    r = np.asarray(pose, dtype=np.float64)[:3, :3]
    if not np.allclose(r.T @ r, np.eye(3), atol=atol) or abs(np.linalg.det(r) - 1.0) > atol:
        raise ValueError("pose is not a rigid transform")


def _frame_name(file_path: str) -> str:
    name = os.path.basename(file_path)
    return name if name.lower().endswith(".png") else name + ".png"


def load_blender(root, split: str = "train", subset_names: Optional[Sequence[str]] = None,
                 near: float = 2.0, far: float = 6.0) -> PosedImageSet:
    """Read ``transforms_{split}.json`` and its frames (public Blender-synthetic layout)."""
    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        angle = float(meta["camera_angle_x"])
        frames = meta["frames"]
        entries = [(_frame_name(fr["file_path"]), fr["file_path"], np.asarray(fr["transform_matrix"], dtype=np.float64))
                   for fr in frames]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed {meta_path}: {exc}") from exc
    entries.sort(key=lambda e: e[0])
    if subset_names:
        known = {e[0] for e in entries}
        unknown = [n for n in subset_names if n not in known]
        if unknown:
            raise KeyError(f"unknown frames in subset: {unknown}")
        wanted = set(subset_names)
        entries = [e for e in entries if e[0] in wanted]
    images, poses, names = [], [], []
    for name, rel, pose in entries:
        if pose.shape != (4, 4):
            raise ValueError(f"malformed transform_matrix for {name}")
        check_pose_rigid(pose)
        rel_png = rel if rel.lower().endswith(".png") else rel + ".png"
        images.append(read_png(root / rel_png))
        poses.append(pose)
        names.append(name)
    poses = np.stack(poses) if poses else np.zeros((0, 4, 4))
    bounds = SceneBounds.for_cameras(poses[:, :3, 3], near=near, far=far) if len(poses) else SceneBounds(near, far)
    return PosedImageSet(np.stack(images) if images else np.zeros((0, 1, 1, 3), np.float32),
                         poses, angle, bounds, names, [split] * len(names))


def save_blender(scene: PosedImageSet, root, split: str) -> None:
    """Write a split in the Blender-synthetic layout (PNG frames + transforms JSON)."""
    root = Path(root)
    frames = []
    for img, pose, name in zip(scene.images, scene.poses, scene.names):
        stem = Path(name).stem
        write_png(root / split / f"{stem}.png", img)
        frames.append({"file_path": f"./{split}/{stem}", "transform_matrix": np.asarray(pose).tolist()})
    (root / f"transforms_{split}.json").write_text(
        json.dumps({"camera_angle_x": scene.camera_angle_x, "frames": frames}, indent=2))


# ---------------------------------------------------------------------------
# procedural oracle scenes


@dataclass(frozen=True)
class ProceduralSceneSpec:
    primitive: str = "sphere"  # "sphere" or "plane"
    radius: float = 1.0
    n_views: int = 4
    n_test_views: int = 4
    height: int = 100
    width: int = 100
    camera_distance: float = 4.0
    camera_angle_x: float = 0.6911112070083618
    checker_cells: int = 8
    elevation_deg: tuple = (15.0, 55.0)
    near: float = 2.0
    far: float = 6.0
    color_a: tuple = (0.9, 0.35, 0.2)
    color_b: tuple = (0.15, 0.35, 0.85)
    light_dir: tuple = (0.4, 0.3, 0.85)
    ambient: float = 0.35

    @classmethod
    def from_dict(cls, d: dict) -> "ProceduralSceneSpec":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def look_at_pose(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``position`` looking at ``target`` (-z forward)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    cam_up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, cam_up, -forward, position
    return pose


def orbit_pose(azimuth: float, elevation: float, distance: float) -> np.ndarray:
    pos = distance * np.array([math.cos(elevation) * math.cos(azimuth),
                               math.cos(elevation) * math.sin(azimuth),
                               math.sin(elevation)])
    return look_at_pose(pos)


def _procedural_poses(spec: ProceduralSceneSpec, rng: np.random.Generator):
    lo, hi = np.radians(spec.elevation_deg)
    offset = rng.uniform(0, 2 * np.pi)
    train = []
    for i in range(spec.n_views):
        az = offset + 2 * np.pi * i / spec.n_views + rng.uniform(-0.2, 0.2)
        train.append(orbit_pose(az, rng.uniform(lo, hi), spec.camera_distance))
    test = []
    for i in range(spec.n_test_views):
        az = offset + 2 * np.pi * (i + 0.5) / max(spec.n_test_views, 1) + rng.uniform(-0.2, 0.2)
        test.append(orbit_pose(az, rng.uniform(lo, hi), spec.camera_distance))
    return train, test


def _camera_rays(pose, height, width, camera_angle_x):
    focal = 0.5 * width / math.tan(0.5 * camera_angle_x)
    j, i = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    d = np.stack([(i + 0.5 - 0.5 * width) / focal, -(j + 0.5 - 0.5 * height) / focal, -np.ones_like(i)], -1)
    d = d @ pose[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(pose[:3, 3], d.shape), d


def trace_primitive(spec: ProceduralSceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """Exact ray-primitive intersection and Lambertian shading.

    Returns ``(rgb, depth, hit)``; depth is the ray parameter of the hit
    (inf on a miss) and misses are white.
    """
    if spec.primitive == "sphere":
        b = np.sum(origins * dirs, -1)
        c = np.sum(origins * origins, -1) - spec.radius ** 2
        disc = b * b - c
        hit = disc >= 0
        t = np.where(hit, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        hit &= t > 0
        p = origins + np.where(hit, t, 0.0)[..., None] * dirs
        normal = p / spec.radius
        lon = np.arctan2(p[..., 1], p[..., 0])
        lat = np.arccos(np.clip(p[..., 2] / spec.radius, -1.0, 1.0))
        cell = np.pi / spec.checker_cells
        parity = (np.floor(lon / cell) + np.floor(lat / cell)).astype(np.int64) % 2
    elif spec.primitive == "plane":
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(dz) > 1e-12, -origins[..., 2] / dz, np.inf)
        p = origins + np.where(np.isfinite(t), t, 0.0)[..., None] * dirs
        hit = (t > 0) & np.isfinite(t) & (np.abs(p[..., 0]) <= spec.radius) & (np.abs(p[..., 1]) <= spec.radius)
        t = np.where(hit, t, np.inf)
        normal = np.zeros_like(p)
        normal[..., 2] = np.where(dz < 0, 1.0, -1.0)
        cell = 2 * spec.radius / spec.checker_cells
        parity = (np.floor(p[..., 0] / cell) + np.floor(p[..., 1] / cell)).astype(np.int64) % 2
    else:
        raise ValueError(f"unknown primitive {spec.primitive!r}")
    albedo = np.where(parity[..., None] == 0, np.asarray(spec.color_a), np.asarray(spec.color_b))
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    shade = spec.ambient + (1 - spec.ambient) * np.clip(np.sum(normal * light, -1), 0.0, None)
    rgb = np.where(hit[..., None], albedo * shade[..., None], 1.0)
    return rgb, t, hit


def render_procedural_view(spec: ProceduralSceneSpec, pose):
    o, d = _camera_rays(np.asarray(pose, dtype=np.float64), spec.height, spec.width, spec.camera_angle_x)
    rgb, depth, _ = trace_primitive(spec, o, d)
    return rgb.astype(np.float32), depth


def make_procedural_scene(spec: ProceduralSceneSpec | dict, seed: int = 0,
                          poses: Optional[Sequence] = None) -> PosedImageSet:
    """Analytically rendered views with exact depth maps.

    Without explicit ``poses``, ``n_views`` training and ``n_test_views``
    held-out cameras orbit the origin; the seed fixes their placement.
    """
    if isinstance(spec, dict):
        spec = ProceduralSceneSpec.from_dict(spec)
    if spec.primitive not in ("sphere", "plane"):
        raise ValueError(f"unknown primitive {spec.primitive!r}")
    rng = np.random.default_rng(seed)
    if poses is None:
        train, test = _procedural_poses(spec, rng)
        all_poses = train + test
        splits = ["train"] * len(train) + ["test"] * len(test)
    else:
        all_poses = [np.asarray(p, dtype=np.float64) for p in poses]
        splits = ["train"] * len(all_poses)
    images, depths = [], []
    for pose in all_poses:
        img, dep = render_procedural_view(spec, pose)
        images.append(img)
        depths.append(dep.astype(np.float32))
    names = [f"r_{i}.png" for i in range(len(all_poses))]
    origins = np.stack([p[:3, 3] for p in all_poses])
    bounds = SceneBounds.for_cameras(origins, near=spec.near, far=spec.far)
    return PosedImageSet(np.stack(images), np.stack(all_poses), spec.camera_angle_x, bounds,
                         names, splits, np.stack(depths))


# ---------------------------------------------------------------------------
# two-plane light fields

LF_NAME = re.compile(r"^(?P<name>.+)_(?P<row>\d+)_(?P<col>\d+)\.png$")


def grid_to_uv(row, col, grid_size: int) -> np.ndarray:
    """Grid index to camera-plane coordinate in [-1, 1]^2 (u from column, v from row)."""
    n = grid_size - 1
    return np.array([2.0 * col / n - 1.0, 2.0 * row / n - 1.0])


def pixel_st(height: int, width: int) -> np.ndarray:
    """(H, W, 2) normalised pixel coordinates in [-1, 1]^2 (s from x, t from y)."""
    t, s = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    return np.stack([s, t], -1)


@dataclass
class LightFieldGrid:
    images: np.ndarray  # (N, H, W, 3)
    indices: list  # (row, col) per image
    grid_size: int
    theta_near: Optional[float] = None
    theta_far: Optional[float] = None

    def __post_init__(self):
        if len(set(self.indices)) != len(self.indices):
            raise ValueError("light-field grid indices must be unique")
        if len(self.images) != len(self.indices):
            raise ValueError("image and index counts disagree")

    def __len__(self):
        return len(self.images)

    @property
    def uv(self) -> np.ndarray:
        return np.stack([grid_to_uv(r, c, self.grid_size) for r, c in self.indices]) if self.indices else np.zeros((0, 2))

    def rays(self):
        """``(uvst (N*H*W, 4), rgb (N*H*W, 3))`` for every pixel of every view."""
        h, w = self.images.shape[1:3]
        st = pixel_st(h, w).reshape(-1, 2)
        uvst = [np.concatenate([np.broadcast_to(uv, st.shape), st], -1) for uv in self.uv]
        return np.concatenate(uvst), self.images.reshape(-1, 3)


def load_lightfield_grid(root, corner_indices, eval_indices, grid_size: Optional[int] = None):
    """Load train (corner) and eval views from ``name_ROW_COL.png`` files."""
    root = Path(root)
    found = {}
    for p in sorted(root.glob("*.png")):
        m = LF_NAME.match(p.name)
        if m:
            found[(int(m["row"]), int(m["col"]))] = p
    meta = {}
    if (root / "lightfield.json").is_file():
        meta = json.loads((root / "lightfield.json").read_text())
    if grid_size is None:
        grid_size = int(meta.get("grid_size", max((max(k) for k in found), default=0) + 1))

    def _load(indices):
        indices = [tuple(int(i) for i in ix) for ix in indices]
        missing = [ix for ix in indices if ix not in found]
        if missing:
            raise KeyError(f"missing light-field views {missing}")
        imgs = np.stack([read_png(found[ix]) for ix in indices]) if indices else np.zeros((0, 1, 1, 3), np.float32)
        return LightFieldGrid(imgs, indices, grid_size, meta.get("theta_near"), meta.get("theta_far"))

    return _load(corner_indices), _load(eval_indices)


STANFORD_CORNERS = [(4, 4), (4, 12), (12, 4), (12, 12)]
STANFORD_EVAL = [(8, 6), (8, 10), (6, 8), (10, 8)]


@dataclass(frozen=True)
class LightFieldSceneSpec:
    grid_size: int = 17
    height: int = 40
    width: int = 40
    background_depth: float = 10.0
    foreground_depth: float = 5.0
    foreground_half_size: float = 2.0
    checker_size: float = 0.8
    depth_range: tuple = (3.0, 16.0)

    @property
    def theta_range(self) -> tuple[float, float]:
        return math.atan(self.depth_range[0]), math.atan(self.depth_range[1])


def trace_lightfield(spec: LightFieldSceneSpec, uvst: np.ndarray):
    """Two fronto-parallel textured layers seen by the ray (u, v, 0) + z (s, t, 1)."""
    u, v, s, t = (uvst[..., i] for i in range(4))
    xf, yf = u + s * spec.foreground_depth, v + t * spec.foreground_depth
    fg = (np.abs(xf) <= spec.foreground_half_size) & (np.abs(yf) <= spec.foreground_half_size)
    parity = (np.floor(xf / spec.checker_size) + np.floor(yf / spec.checker_size)).astype(np.int64) % 2
    fg_rgb = np.where(parity[..., None] == 0, [0.9, 0.8, 0.2], [0.2, 0.3, 0.7])
    xb, yb = u + s * spec.background_depth, v + t * spec.background_depth
    bg_rgb = np.stack([0.5 + 0.3 * np.sin(0.7 * xb), 0.5 + 0.3 * np.cos(0.5 * yb),
                       0.5 + 0.2 * np.sin(0.4 * (xb + yb))], -1)
    rgb = np.where(fg[..., None], fg_rgb, bg_rgb)
    depth = np.where(fg, spec.foreground_depth, spec.background_depth)
    return rgb.astype(np.float32), depth


def make_lightfield_scene(spec: LightFieldSceneSpec = LightFieldSceneSpec(), indices=None) -> LightFieldGrid:
    if indices is None:
        indices = [(r, c) for r in range(spec.grid_size) for c in range(spec.grid_size)]
    st = pixel_st(spec.height, spec.width)
    imgs = []
    for r, c in indices:
        uv = grid_to_uv(r, c, spec.grid_size)
        uvst = np.concatenate([np.broadcast_to(uv, st.shape), st], -1)
        imgs.append(trace_lightfield(spec, uvst)[0])
    lo, hi = spec.theta_range
    return LightFieldGrid(np.stack(imgs), [tuple(ix) for ix in indices], spec.grid_size, lo, hi)


def save_lightfield_grid(grid: LightFieldGrid, root, name: str = "scene") -> None:
    root = Path(root)
    for img, (r, c) in zip(grid.images, grid.indices):
        write_png(root / f"{name}_{r:02d}_{c:02d}.png", img)
    (root / "lightfield.json").write_text(json.dumps(
        {"grid_size": grid.grid_size, "theta_near": grid.theta_near, "theta_far": grid.theta_far}))
