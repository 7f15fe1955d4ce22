"""Z-buffer rasterization of per-point descriptors into raw images.

Each point lands on exactly one pixel. Among points sharing a pixel the one
with the smallest ``(depth, index)`` wins, so the result does not depend on
the order points are visited.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import Camera, PointCloud, camera_coords, camera_halve, camera_scale, project_coords

NONE = -1


@dataclass(frozen=True, eq=False)
class RawImage:
    """``values`` is ``[M, H, W]``; ``winner``/``depth`` are ``[H, W]``.

    Supersampled rasters keep the full-resolution source in ``source`` and
    carry no winner map of their own.
    """

    values: np.ndarray
    winner: np.ndarray | None
    depth: np.ndarray | None
    source: "RawImage | None" = None
    factor: int = 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1:]

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RawImage):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.dtype == b.dtype and np.array_equal(a, b)

        return (same(self.values, other.values) and same(self.winner, other.winner)
                and same(self.depth, other.depth) and self.factor == other.factor)


@dataclass(frozen=True)
class RawPyramid:
    levels: list[RawImage]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> RawImage:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)


class DescriptorSet:
    """``N x M`` learnable descriptors; zero-initialised by default."""

    def __init__(self, values, requires_grad: bool = True):
        values = np.asarray(values)
        if values.ndim != 2:
            raise ValueError(f"descriptors must be N x M, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("descriptors must be finite")
        self.tensor = ad.Tensor(values, requires_grad=requires_grad, name="descriptors")

    @classmethod
    def zeros(cls, n: int, m: int = 8, dtype=np.float32) -> "DescriptorSet":
        return cls(np.zeros((n, m), dtype=dtype))

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data

    @values.setter
    def values(self, v: np.ndarray) -> None:
        self.tensor.data = v

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return self.values.dtype == other.values.dtype and np.array_equal(self.values, other.values)


def _as_values(desc) -> np.ndarray:
    if isinstance(desc, DescriptorSet):
        return desc.values
    if isinstance(desc, ad.Tensor):
        return desc.data
    return np.asarray(desc)


def zbuffer(cloud: PointCloud, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Winner index and depth per pixel."""
    return zbuffer_levels(cloud, [cam])[0]


def zbuffer_levels(cloud: PointCloud, cams: list[Camera]) -> list[tuple[np.ndarray, np.ndarray]]:
    """:func:`zbuffer` for cameras sharing one pose, transforming the points once.

    Depth does not depend on the intrinsics, so the (depth, index) order is
    computed once and each level keeps the lowest-ranked point per pixel.
    """
    coords = camera_coords(cloud, cams[0])
    for c in cams[1:]:
        if not (np.array_equal(c.R, cams[0].R) and np.array_equal(c.t, cams[0].t)):
            raise ValueError("zbuffer_levels needs cameras with identical pose")
    n = len(cloud)
    order = np.argsort(coords[2], kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    out = []
    for cam in cams:
        proj = project_coords(*coords, cam)
        idx = np.flatnonzero(proj.visible)
        best = np.full(cam.height * cam.width, n, dtype=np.int64)
        np.minimum.at(best, proj.iy[idx] * cam.width + proj.ix[idx], rank[idx])
        hit = best < n
        winner = np.full(best.shape, NONE, dtype=np.int64)
        winner[hit] = order[best[hit]]
        depth = np.full(best.shape, np.inf)
        depth[hit] = proj.depth[winner[hit]]
        out.append((winner.reshape(cam.height, cam.width), depth.reshape(cam.height, cam.width)))
    return out


def paint(desc_values: np.ndarray, winner: np.ndarray) -> np.ndarray:
    """``[M, H, W]`` image of the winners' descriptors, zero where empty."""
    hit = winner >= 0
    if len(desc_values) == 0:
        return np.zeros((desc_values.shape[1],) + winner.shape, dtype=desc_values.dtype)
    out = desc_values[np.where(hit, winner, 0)]
    out[~hit] = 0
    return np.moveaxis(out, -1, 0).copy()


def rasterize(cloud: PointCloud, desc, cam: Camera) -> RawImage:
    values = _as_values(desc)
    if values.ndim != 2 or len(values) != len(cloud):
        raise ValueError(f"descriptor rows ({values.shape[0] if values.ndim else 0}) "
                         f"do not match point count ({len(cloud)})")
    winner, depth = zbuffer(cloud, cam)
    return RawImage(paint(values, winner), winner, depth)


def pyramid_cameras(cam: Camera, levels: int) -> list[Camera]:
    if levels < 1:
        raise ValueError(f"pyramid needs at least one level, got {levels}")
    step = 2 ** (levels - 1)
    if cam.width % step or cam.height % step:
        raise ValueError(f"extents {cam.width}x{cam.height} are not divisible by 2^{levels - 1}")
    cams = [cam]
    for _ in range(levels - 1):
        cams.append(camera_halve(cams[-1]))
    return cams


def rasterize_pyramid(cloud: PointCloud, desc, cam: Camera, levels: int) -> RawPyramid:
    """Independent z-buffers at full, half, quarter... resolution."""
    values = _as_values(desc)
    if values.ndim != 2 or len(values) != len(cloud):
        raise ValueError(f"descriptor rows ({values.shape[0] if values.ndim else 0}) "
                         f"do not match point count ({len(cloud)})")
    return RawPyramid([RawImage(paint(values, w), w, d)
                       for w, d in zbuffer_levels(cloud, pyramid_cameras(cam, levels))])


def rasterize_aa(cloud: PointCloud, desc, cam: Camera, factor: int = 2) -> RawImage:
    """Rasterize at ``factor``x resolution and box-average back down."""
    if factor not in (1, 2, 4):
        raise ValueError(f"anti-aliasing factor must be 1, 2 or 4, got {factor}")
    if factor == 1:
        return rasterize(cloud, desc, cam)
    big = rasterize(cloud, desc, camera_scale(cam, factor))
    values = ad.Tensor(big.values)
    for _ in range(factor.bit_length() - 1):
        values = ad.downsample2x(values)
    return RawImage(values.data, None, None, source=big, factor=factor)


def _spread(grad: np.ndarray, factor: int) -> np.ndarray:
    """Transpose of the repeated 2x box average."""
    for _ in range(factor.bit_length() - 1):
        grad = grad.repeat(2, axis=1).repeat(2, axis=2) * grad.dtype.type(0.25)
    return grad


def rasterize_backward(pyramid: RawPyramid | list[RawImage], upstream: list[np.ndarray],
                       n_points: int) -> np.ndarray:
    """Scatter per-level ``[M, H, W]`` gradients onto the ``N x M`` descriptors."""
    levels = list(pyramid)
    if len(upstream) != len(levels):
        raise ValueError(f"got {len(upstream)} upstream gradients for {len(levels)} levels")
    total = None
    for level, g in zip(levels, upstream):
        g = np.asarray(g)
        if g.shape != level.values.shape:
            raise ValueError(f"upstream gradient shape {g.shape} != raw image shape {level.values.shape}")
        if level.source is not None:
            g, level = _spread(g, level.factor), level.source
        part = ad.scatter_rows(g.reshape(g.shape[0], -1), level.winner.ravel(), n_points)
        total = part if total is None else total + part
    return total


def raw_tensor(desc: ad.Tensor, raw: RawImage) -> ad.Tensor:
    """Differentiable view of ``raw`` as a function of the descriptor table."""
    if raw.source is not None:
        out = ad.gather_rows(desc, raw.source.winner)
        for _ in range(raw.factor.bit_length() - 1):
            out = ad.downsample2x(out)
        return out
    return ad.gather_rows(desc, raw.winner)


def merge_rasters(a: RawImage, b: RawImage, b_offset: int = 0) -> RawImage:
    """Per pixel keep the smaller ``(depth, source, winner)``; ``a`` is source 0.

    ``b_offset`` is added to ``b``'s winner indices, so merging rasters of
    two clouds with ``b_offset = len(cloud_a)`` reproduces the raster of the
    concatenated cloud.
    """
    if a.values.shape != b.values.shape:
        raise ValueError(f"merge_rasters: shape mismatch {a.values.shape} vs {b.values.shape}")
    if a.winner is None or b.winner is None:
        raise ValueError("merge_rasters needs winner maps (not supersampled rasters)")
    wb = np.where(b.winner >= 0, b.winner + b_offset, NONE)
    # equal depths keep a, which also covers two empty pixels
    take_b = b.depth < a.depth
    return RawImage(np.where(take_b[None], b.values, a.values),
                    np.where(take_b, wb, a.winner),
                    np.where(take_b, b.depth, a.depth))


# descriptor file ------------------------------------------------------------------

DESCRIPTOR_MAGIC = b"NPBD"


def save_descriptors(path: str | Path, desc) -> None:
    values = np.ascontiguousarray(_as_values(desc), dtype="<f4")
    with open(path, "wb") as f:
        f.write(DESCRIPTOR_MAGIC)
        f.write(struct.pack("<II", *values.shape))
        f.write(values.tobytes())


def load_descriptors(path: str | Path) -> DescriptorSet:
    raw = Path(path).read_bytes()
    if raw[:4] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: not an NPBD descriptor file (bad magic)")
    n, m = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * n * m:
        raise ValueError(f"{path}: expected {n}x{m} descriptors, file size is {len(raw)} bytes")
    values = np.frombuffer(raw[12:], dtype="<f4").astype(np.float32).reshape(n, m)
    return DescriptorSet(values)
