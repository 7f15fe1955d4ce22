"""Point clouds, pinhole cameras, rigid transforms and their file formats."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

Z_NEAR = 1e-4
_ORTHO_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(pos).all():
            raise ValueError("point positions must be finite")
        object.__setattr__(self, "positions", pos)
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(col) != len(pos):
                raise ValueError(f"colors have {len(col)} rows, expected {len(pos)}")
            if len(col) and (col.min() < 0 or col.max() > 1):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.colors is None) != (other.colors is None):
            return False
        same_colors = self.colors is None or np.array_equal(self.colors, other.colors)
        return np.array_equal(self.positions, other.positions) and same_colors

    @classmethod
    def empty(cls, with_colors: bool = False) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)) if with_colors else None)


def _check_rotation(r: np.ndarray) -> None:
    if r.shape != (3, 3) or not np.isfinite(r).all():
        raise ValueError("invalid rotation: expected a finite 3x3 matrix")
    if not np.allclose(r.T @ r, np.eye(3), atol=_ORTHO_TOL, rtol=0):
        raise ValueError("invalid rotation: matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
        raise ValueError("invalid rotation: determinant is not +1")


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera; ``p_cam = R @ p_world + t``.

    Integer pixel ``(ix, iy)`` covers the continuous square centred on it.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        _check_rotation(r)
        if not np.isfinite(t).all():
            raise ValueError("camera translation must be finite")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise ValueError("image extents must be integers")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"image extents must be >= 2, got {self.width}x{self.height}")
        object.__setattr__(self, "R", r)
        object.__setattr__(self, "t", t)
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def viewpoint(self) -> np.ndarray:
        return -self.R.T @ self.t

    def __eq__(self, other) -> bool:
        if not isinstance(other, Camera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        missing = {"width", "height", "fx", "fy", "cx", "cy", "R", "t"} - set(d)
        if missing:
            raise ValueError(f"camera is missing fields: {sorted(missing)}")
        if len(d["R"]) != 9 or len(d["t"]) != 3:
            raise ValueError("camera R must have 9 entries and t 3 entries")
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["R"], dtype=np.float64),
                   np.array(d["t"], dtype=np.float64), d["width"], d["height"])

    @classmethod
    def look_at(cls, eye, target, up, *, fx: float, fy: float | None = None,
                width: int, height: int, cx: float | None = None, cy: float | None = None) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with image +y pointing along ``-up``."""
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            raise ValueError("look_at: up vector is parallel to the viewing direction")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        return cls(fx, fx if fy is None else fy,
                   (width - 1) / 2 if cx is None else cx,
                   (height - 1) / 2 if cy is None else cy,
                   r, -r @ eye, width, height)


@dataclass(frozen=True)
class Projection:
    ix: np.ndarray
    iy: np.ndarray
    depth: np.ndarray
    visible: np.ndarray


def round_half_up(a):
    return np.floor(np.asarray(a) + 0.5)


def camera_coords(cloud: PointCloud, cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``R @ p + t`` per point, written out term by term.

    The explicit evaluation order lets a scalar reimplementation reproduce
    the result bit for bit.
    """
    p = cloud.positions
    r, t = cam.R, cam.t
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    xc = r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + t[0]
    yc = r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + t[1]
    zc = r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + t[2]
    return xc, yc, zc


def project_coords(xc: np.ndarray, yc: np.ndarray, zc: np.ndarray, cam: Camera) -> Projection:
    front = zc > Z_NEAR
    safe_z = np.where(front, zc, 1.0)
    u = round_half_up(cam.fx * xc / safe_z + cam.cx)
    v = round_half_up(cam.fy * yc / safe_z + cam.cy)
    visible = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    ix = np.where(visible, u, -1).astype(np.int64)
    iy = np.where(visible, v, -1).astype(np.int64)
    return Projection(ix, iy, zc, visible)


def project(cloud: PointCloud, cam: Camera) -> Projection:
    """Nearest-pixel projection; invisible points get pixel ``(-1, -1)``."""
    return project_coords(*camera_coords(cloud, cam), cam)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform applying ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"R": [float(v) for v in self.rotation.ravel()],
                "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["R"], dtype=np.float64), np.array(d["t"], dtype=np.float64))


def apply_transform(cloud: PointCloud, tf: RigidTransform) -> PointCloud:
    return PointCloud(cloud.positions @ tf.rotation.T + tf.translation, cloud.colors)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid.

    Output is ordered by lexicographic voxel index.
    """
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)

    def centroid(values):
        return np.stack([np.bincount(inverse, weights=values[:, c], minlength=len(uniq))
                         for c in range(values.shape[1])], axis=1) / counts[:, None]

    pos = centroid(cloud.positions)
    # centroid rounding must not push a point out of its cell
    lo, hi = uniq * voxel, (uniq + 1) * voxel
    pos = np.clip(pos, lo, np.nextafter(hi, -np.inf))
    colors = None if cloud.colors is None else np.clip(centroid(cloud.colors), 0.0, 1.0)
    return PointCloud(pos, colors)


def camera_halve(cam: Camera) -> Camera:
    if cam.width % 2 or cam.height % 2:
        raise ValueError(f"camera_halve: extents must be even, got {cam.width}x{cam.height}")
    return replace(cam, fx=cam.fx / 2, fy=cam.fy / 2,
                   cx=(cam.cx + 0.5) / 2 - 0.5, cy=(cam.cy + 0.5) / 2 - 0.5,
                   width=cam.width // 2, height=cam.height // 2)


def camera_scale(cam: Camera, factor: float, width: int | None = None,
                 height: int | None = None) -> Camera:
    """Resample the image plane by ``factor``, keeping pixel centres aligned."""
    return replace(cam, fx=cam.fx * factor, fy=cam.fy * factor,
                   cx=(cam.cx + 0.5) * factor - 0.5, cy=(cam.cy + 0.5) * factor - 0.5,
                   width=round(cam.width * factor) if width is None else width,
                   height=round(cam.height * factor) if height is None else height)


def camera_crop(cam: Camera, ox: int, oy: int, width: int, height: int) -> Camera:
    """Viewport of extents ``width x height`` starting at pixel ``(ox, oy)``."""
    return replace(cam, cx=cam.cx - ox, cy=cam.cy - oy, width=width, height=height)


# file formats ------------------------------------------------------------------

def read_ply(path: str | Path) -> PointCloud:
    """Read an ASCII PLY with float ``x, y, z`` and optional uchar ``red, green, blue``."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"malformed PLY {path}: missing 'ply' header")
    props: list[str] = []
    n_vertex = None
    in_vertex = False
    end = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"malformed PLY {path}: only ascii format is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            end = i
            break
    if end is None or n_vertex is None:
        raise ValueError(f"malformed PLY {path}: no vertex element or end_header")
    if not {"x", "y", "z"} <= set(props):
        raise ValueError(f"malformed PLY {path}: vertex needs x, y, z properties")
    rows = [ln.split() for ln in lines[end + 1:end + 1 + n_vertex]]
    if len(rows) != n_vertex or any(len(r) < len(props) for r in rows):
        raise ValueError(f"malformed PLY {path}: expected {n_vertex} vertex rows")
    table = np.array([r[:len(props)] for r in rows], dtype=np.float64).reshape(n_vertex, len(props))
    col = {name: table[:, i] for i, name in enumerate(props)}
    pos = np.stack([col["x"], col["y"], col["z"]], axis=1)
    colors = None
    if {"red", "green", "blue"} <= set(props):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1) / 255.0
    return PointCloud(pos, colors)


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    """ASCII PLY; positions use ``repr`` so they read back bit-exact."""
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z"]
    colors = None
    if cloud.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        colors = np.rint(cloud.colors * 255).astype(int)
    header.append("end_header")
    out = header
    for i, p in enumerate(cloud.positions):
        row = " ".join(repr(float(v)) for v in p)
        if colors is not None:
            row += " " + " ".join(str(c) for c in colors[i])
        out.append(row)
    Path(path).write_text("\n".join(out) + "\n")


def read_cameras(path: str | Path) -> list[tuple[str, Camera]]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        return [("", Camera.from_dict(data))]
    return [(entry["image"], Camera.from_dict(entry["camera"])) for entry in data]


def write_cameras(path: str | Path, views: list[tuple[str, Camera]]) -> None:
    Path(path).write_text(json.dumps(
        [{"image": name, "camera": cam.to_dict()} for name, cam in views], indent=1))
