"""Scene datasets: synthetic generation, on-disk layout, metrics, composition.

A scene directory holds::

    points.ply        ASCII PLY (x, y, z and optional uchar colors)
    cameras.json      [{"image": "images/000.png", "camera": {...}}, ...]
    images/*.png      8-bit RGB ground truth
    split.json        {"train": [...], "holdout": [...]}
    descriptors.npbd  optional fitted descriptors
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (Camera, PointCloud, RigidTransform, apply_transform, camera_scale,
                       read_cameras, read_ply, write_cameras, write_ply)
from .raster import DescriptorSet, load_descriptors, paint, save_descriptors, zbuffer


class SceneFormatError(ValueError):
    """Malformed scene file."""


class MissingSceneFileError(FileNotFoundError):
    pass


class ExtentMismatchError(ValueError):
    pass


@dataclass(eq=False)
class View:
    camera: Camera
    image: np.ndarray
    name: str = ""


@dataclass(eq=False)
class SceneDataset:
    cloud: PointCloud
    views: list[View]
    split: dict[str, list[int]] = field(default_factory=dict)
    desc: DescriptorSet | None = None

    def __post_init__(self):
        if not self.split:
            self.split = {"train": list(range(len(self.views))), "holdout": []}

    @property
    def train_indices(self) -> list[int]:
        return list(self.split.get("train", []))

    @property
    def holdout_indices(self) -> list[int]:
        return list(self.split.get("holdout", []))

    def validate(self) -> None:
        for i, view in enumerate(self.views):
            cam = view.camera
            if view.image.shape != (3, cam.height, cam.width):
                raise ExtentMismatchError(
                    f"view {i}: image shape {view.image.shape} does not match camera "
                    f"{cam.width}x{cam.height}")
        train, holdout = set(self.train_indices), set(self.holdout_indices)
        if train & holdout:
            raise ValueError(f"views {sorted(train & holdout)} are in both train and holdout")
        bad = [i for i in train | holdout if not 0 <= i < len(self.views)]
        if bad:
            raise ValueError(f"split references missing views {bad}")
        if self.desc is not None and self.desc.n != len(self.cloud):
            raise ValueError(f"descriptor rows {self.desc.n} != point count {len(self.cloud)}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneDataset):
            return NotImplemented
        if (self.desc is None) != (other.desc is None):
            return False
        return (self.cloud == other.cloud and self.split == other.split
                and (self.desc is None or self.desc == other.desc)
                and len(self.views) == len(other.views)
                and all(a.camera == b.camera and a.name == b.name
                        and a.image.dtype == b.image.dtype and np.array_equal(a.image, b.image)
                        for a, b in zip(self.views, other.views)))


# metrics --------------------------------------------------------------------------

PSNR_CAP = 99.0


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 99."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


# image io --------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid so PNG storage is lossless."""
    return (to_uint8(image).astype(np.float32) / np.float32(255))


def write_png(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(np.moveaxis(to_uint8(image), 0, -1), mode="RGB").save(path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return np.moveaxis(arr, -1, 0).astype(np.float32) / np.float32(255)


# scene directories ------------------------------------------------------------------

def save_scene(directory: str | Path, scene: SceneDataset) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    write_ply(d / "points.ply", scene.cloud)
    entries = []
    for i, view in enumerate(scene.views):
        name = view.name or f"images/{i:03d}.png"
        write_png(d / name, view.image)
        entries.append((name, view.camera))
    write_cameras(d / "cameras.json", entries)
    (d / "split.json").write_text(json.dumps(scene.split))
    if scene.desc is not None:
        save_descriptors(d / "descriptors.npbd", scene.desc)


def load_scene(directory: str | Path) -> SceneDataset:
    d = Path(directory)
    for name in ("points.ply", "cameras.json", "split.json"):
        if not (d / name).exists():
            raise MissingSceneFileError(f"scene {d} is missing {name}")
    try:
        cloud = read_ply(d / "points.ply")
    except ValueError as exc:
        raise SceneFormatError(str(exc)) from exc
    try:
        entries = read_cameras(d / "cameras.json")
        split = json.loads((d / "split.json").read_text())
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise SceneFormatError(f"malformed JSON in scene {d}: {exc}") from exc
    views = []
    for name, cam in entries:
        if not (d / name).exists():
            raise MissingSceneFileError(f"scene {d} is missing image {name}")
        views.append(View(cam, read_png(d / name), name))
    desc = load_descriptors(d / "descriptors.npbd") if (d / "descriptors.npbd").exists() else None
    scene = SceneDataset(cloud, views, {"train": list(split.get("train", [])),
                                        "holdout": list(split.get("holdout", []))}, desc)
    scene.validate()
    return scene


# composition ----------------------------------------------------------------------

def compose_scenes(a: SceneDataset, b: SceneDataset, transform: RigidTransform) -> SceneDataset:
    """Union of two scenes with ``b`` moved by ``transform``; views come from ``a``."""
    moved = apply_transform(b.cloud, transform)
    if len(b.cloud) == 0:
        cloud = a.cloud
    elif len(a.cloud) == 0:
        cloud = moved
    else:
        colors = None
        if a.cloud.colors is not None and moved.colors is not None:
            colors = np.concatenate([a.cloud.colors, moved.colors])
        cloud = PointCloud(np.concatenate([a.cloud.positions, moved.positions]), colors)
    desc = None
    if a.desc is not None or b.desc is not None:
        if a.desc is None or b.desc is None:
            raise ValueError("both scenes need descriptors to be composed")
        if a.desc.m != b.desc.m:
            raise ValueError(f"descriptor width mismatch: {a.desc.m} vs {b.desc.m}")
        desc = DescriptorSet(np.concatenate([a.desc.values, b.desc.values]))
    return SceneDataset(cloud, list(a.views), {k: list(v) for k, v in a.split.items()}, desc)


# synthetic scenes --------------------------------------------------------------------

PRESETS = ("cube", "sphere", "two-planes")


@dataclass(frozen=True)
class SynthSpec:
    preset: str = "cube"
    n_points: int = 12000
    views: int = 20
    holdout_every: int = 5
    radius: float = 3.0
    width: int = 128
    height: int = 128
    density: int = 10
    supersample: int = 4
    noise_frequency: float = 2.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.views < 1 or self.radius <= 0:
            raise ValueError("views must be >= 1 and radius > 0")
        if self.width % 32 or self.height % 32:
            raise ValueError(f"extents {self.width}x{self.height} must be divisible by 32")
        if self.density < 1 or self.supersample not in (1, 2, 4):
            raise ValueError("density must be >= 1 and supersample one of 1, 2, 4")


@dataclass(eq=False)
class SynthScene:
    dataset: SceneDataset
    oracle_cloud: PointCloud
    labels: np.ndarray
    coverage: list[np.ndarray]


def _smoothstep(t):
    return t * t * (3 - 2 * t)


def value_noise(points: np.ndarray, lattice: np.ndarray, frequency: float) -> np.ndarray:
    """Trilinear value noise on a periodic lattice."""
    n = lattice.shape[0]
    p = points * frequency
    base = np.floor(p).astype(np.int64)
    f = _smoothstep(p - base)
    out = np.zeros(len(points))
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1 - f[:, 2]
                idx = (base + (dx, dy, dz)) % n
                out += wx * wy * wz * lattice[idx[:, 0], idx[:, 1], idx[:, 2]]
    return out


class Texture:
    """Three-octave value-noise RGB texture."""

    def __init__(self, seed: int, frequency: float = 2.0, size: int = 16):
        rng = np.random.default_rng([seed, 7])
        self.lattices = rng.random((3, 3, size, size, size))
        self.frequency = frequency

    def __call__(self, points: np.ndarray) -> np.ndarray:
        channels = []
        for c in range(3):
            v = sum(0.5 ** o * value_noise(points, self.lattices[c, o], self.frequency * 2 ** o)
                    for o in range(3)) / 1.75
            channels.append(v)
        rgb = np.stack(channels, axis=1)
        return np.clip(0.5 + 1.6 * (rgb - 0.5), 0, 1)


def _cube_surface(rng, n, stratified=False):
    face = np.arange(n) % 6 if stratified else rng.integers(0, 6, n)
    if stratified:
        per = int(np.ceil(n / 6))
        g = int(np.ceil(np.sqrt(per)))
        cells = np.arange(per)
        uv = (np.stack([cells % g, cells // g], axis=1) + rng.random((per, 2))) / g
        uv = np.concatenate([uv] * 6)[:n] * 2 - 1
        face = np.repeat(np.arange(6), per)[:n]
    else:
        uv = rng.uniform(-1, 1, (n, 2))
    axis, sign = face // 2, np.where(face % 2, 1.0, -1.0)
    pts = np.empty((n, 3))
    for a in range(3):
        sel = axis == a
        others = [o for o in range(3) if o != a]
        pts[sel, a] = sign[sel]
        pts[sel, others[0]] = uv[sel, 0]
        pts[sel, others[1]] = uv[sel, 1]
    return pts * 0.5


def _sphere_surface(rng, n):
    v = rng.standard_normal((n, 3))
    return 0.6 * v / np.linalg.norm(v, axis=1, keepdims=True)


def _planes(rng, n):
    front = np.column_stack([rng.uniform(-0.8, 0.8, (n, 2)), np.zeros(n)])
    far = np.column_stack([rng.uniform(-0.5, 0.5, (2 * n, 2)), np.full(2 * n, -1.0)])
    return np.concatenate([front, far]), np.concatenate([np.zeros(n, int), np.ones(2 * n, int)])


def orbit_cameras(n: int, radius: float, width: int, height: int, focal: float | None = None,
                  center=(0.0, 0.0, 0.0), elevations=(20.0, 35.0)) -> list[Camera]:
    """Cameras on a circle around ``center`` alternating between ``elevations`` (degrees)."""
    center = np.asarray(center, dtype=np.float64)
    focal = 1.1 * width if focal is None else focal
    cams = []
    for i in range(n):
        az = 2 * np.pi * i / n
        el = np.radians(elevations[i % len(elevations)])
        eye = center + radius * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        cams.append(Camera.look_at(eye, center, (0, 1, 0), fx=focal, width=width, height=height))
    return cams


def plane_cameras(rng, n: int, radius: float, width: int, height: int, max_tilt: float = 8.0) -> list[Camera]:
    """Cameras in front of the +z side of the two-planes preset, slightly tilted."""
    cams = []
    for _ in range(n):
        tilt = np.radians(rng.uniform(-max_tilt, max_tilt, 2))
        eye = radius * np.array([np.sin(tilt[0]), np.sin(tilt[1]), 1.0])
        eye *= radius / np.linalg.norm(eye)
        cams.append(Camera.look_at(eye, (0, 0, -0.5), (0, 1, 0), fx=1.1 * width, width=width, height=height))
    return cams


def oracle_render(cloud: PointCloud, cam: Camera, factor: int = 4,
                  depth_tolerance: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth image from a dense colored cloud, plus per-pixel coverage counts.

    The cloud is z-buffered at ``factor``x resolution. Each output pixel
    averages the colors of its covered subpixels that lie within
    ``depth_tolerance`` (relative) of the nearest one, which keeps surfaces
    seen through sampling gaps out of the average. Uncovered pixels are black.
    """
    big = camera_scale(cam, factor)
    winner, depth = zbuffer(cloud, big)
    colors = paint(cloud.colors, winner).astype(np.float64)
    h, w = cam.height, cam.width
    blocks = depth.reshape(h, factor, w, factor)
    nearest = blocks.min(axis=(1, 3), keepdims=True)
    keep = (winner.reshape(h, factor, w, factor) >= 0) & (blocks <= nearest * (1 + depth_tolerance))
    count = keep.sum(axis=(1, 3))
    summed = (colors.reshape(3, h, factor, w, factor) * keep).sum(axis=(2, 4))
    image = np.where(count > 0, summed / np.maximum(count, 1), 0.0)
    return quantize(image), count


def generate_synthetic(spec: SynthSpec = SynthSpec(), seed: int = 0) -> SynthScene:
    rng = np.random.default_rng(seed)
    texture = Texture(seed, spec.noise_frequency)
    n = spec.n_points
    labels = np.zeros(n, dtype=np.int64)
    if spec.preset == "cube":
        sparse = _cube_surface(rng, n)
        dense = _cube_surface(rng, spec.density * n, stratified=True)
    elif spec.preset == "sphere":
        sparse = _sphere_surface(rng, n)
        dense = _sphere_surface(rng, spec.density * n)
    else:
        sparse, labels = _planes(rng, n)
        dense, _ = _planes(rng, spec.density * n)
    to255 = lambda c: np.rint(c * 255) / 255  # noqa: E731
    cloud = PointCloud(sparse, to255(texture(sparse)))
    oracle = PointCloud(dense, texture(dense))
    if spec.preset == "two-planes":
        cams = plane_cameras(rng, spec.views, spec.radius, spec.width, spec.height)
    else:
        cams = orbit_cameras(spec.views, spec.radius, spec.width, spec.height)
    views, coverage = [], []
    for i, cam in enumerate(cams):
        image, count = oracle_render(oracle, cam, spec.supersample)
        views.append(View(cam, image, f"images/{i:03d}.png"))
        coverage.append(count)
    holdout = [i for i in range(spec.views) if spec.holdout_every and i % spec.holdout_every == spec.holdout_every // 2]
    train = [i for i in range(spec.views) if i not in holdout]
    dataset = SceneDataset(cloud, views, {"train": train, "holdout": holdout})
    return SynthScene(dataset, oracle, labels, coverage)
