"""Gated-convolution U-Net that turns a raw-image pyramid into RGB.

Encoder stage ``e`` (1-based) works at ``1/2^(e-1)`` resolution with
``base * 2^(e-1)`` channels. For ``e <= pyramid_levels`` the raw image of
that resolution is concatenated to the stage input. The bottleneck keeps the
deepest encoder width, and each decoder stage upsamples, concatenates the
matching encoder output and applies two gated convolutions. A 1x1
convolution and a sigmoid produce the image.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .raster import RawPyramid, raw_tensor


@dataclass(frozen=True)
class RenderNetConfig:
    levels: int = 5
    in_channels: int = 8
    base_channels: int = 8
    pyramid_levels: int = 4
    output_channels: int = 3
    max_channels: int | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if not 1 <= self.pyramid_levels <= self.levels:
            raise ValueError(f"pyramid_levels must be in [1, levels={self.levels}], got {self.pyramid_levels}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.output_channels != 3:
            raise ValueError("the rendering network outputs RGB (output_channels=3)")

    def width(self, stage: int) -> int:
        w = self.base_channels * 2 ** (min(stage, self.levels) - 1)
        return w if self.max_channels is None else min(w, self.max_channels)

    def check_extents(self, height: int, width: int) -> None:
        step = 2 ** self.levels
        if height % step or width % step:
            raise ValueError(f"input extents {height}x{width} must be divisible by 2^{self.levels}={step}")


def _layer_shapes(cfg: RenderNetConfig) -> list[tuple[str, int, int, int]]:
    """``(name, c_in, c_out, kernel)`` for every convolution, in build order."""
    layers = []
    prev = 0
    for e in range(1, cfg.levels + 1):
        c_in = prev + (cfg.in_channels if e <= cfg.pyramid_levels else 0)
        w = cfg.width(e)
        layers += [(f"enc{e}.0", c_in, w, 3), (f"enc{e}.1", w, w, 3)]
        prev = w
    wb = cfg.width(cfg.levels)
    layers += [("mid.0", prev, wb, 3), ("mid.1", wb, wb, 3)]
    prev = wb
    for e in range(cfg.levels, 0, -1):
        w = cfg.width(e)
        layers += [(f"dec{e}.0", prev + w, w, 3), (f"dec{e}.1", w, w, 3)]
        prev = w
    layers.append(("out", prev, cfg.output_channels, 1))
    return layers


class RenderNetParams(dict):
    """Mapping ``name -> Tensor`` plus the config it was built for."""

    def __init__(self, config: RenderNetConfig, tensors: dict[str, ad.Tensor]):
        super().__init__(tensors)
        self.config = config

    def count(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def copy(self) -> "RenderNetParams":
        return RenderNetParams(self.config, {k: ad.Tensor(t.data.copy(), requires_grad=t.requires_grad, name=k)
                                             for k, t in self.items()})

    def astype(self, dtype) -> "RenderNetParams":
        return RenderNetParams(self.config, {k: ad.Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k)
                                             for k, t in self.items()})

    def equal(self, other: "RenderNetParams") -> bool:
        return (self.config == other.config and self.keys() == other.keys()
                and all(self[k].data.dtype == other[k].data.dtype
                        and np.array_equal(self[k].data, other[k].data) for k in self))


def build(config: RenderNetConfig, seed: int = 0, dtype=np.float32) -> RenderNetParams:
    """He-uniform weights from ``seed``; all biases zero."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, ad.Tensor] = {}

    def add(name, arr):
        tensors[name] = ad.Tensor(arr.astype(dtype), requires_grad=True, name=name)

    for name, c_in, c_out, k in _layer_shapes(config):
        bound = np.sqrt(6.0 / (c_in * k * k))
        if k == 1:
            add(f"{name}.w", rng.uniform(-bound, bound, (c_out, c_in, k, k)))
            add(f"{name}.b", np.zeros(c_out))
        else:
            add(f"{name}.fw", rng.uniform(-bound, bound, (c_out, c_in, k, k)))
            add(f"{name}.gw", rng.uniform(-bound, bound, (c_out, c_in, k, k)))
            add(f"{name}.fb", np.zeros(c_out))
            add(f"{name}.gb", np.zeros(c_out))
    return RenderNetParams(config, tensors)


def _block(params: RenderNetParams, name: str, x: ad.Tensor) -> ad.Tensor:
    for j in (0, 1):
        p = f"{name}.{j}"
        x = ad.gated_conv(x, params[f"{p}.fw"], params[f"{p}.gw"],
                          params[f"{p}.fb"], params[f"{p}.gb"], stride=1, padding=1)
    return x


def forward(params: RenderNetParams, raw: Sequence[ad.Tensor]) -> ad.Tensor:
    """RGB image ``[3, H, W]`` in (0, 1) from per-level raw tensors ``raw[t]``."""
    cfg = params.config
    if len(raw) != cfg.pyramid_levels:
        raise ValueError(f"expected {cfg.pyramid_levels} raw images, got {len(raw)}")
    c, h, w = raw[0].shape
    cfg.check_extents(h, w)
    for t, r in enumerate(raw):
        expected = (cfg.in_channels, h >> t, w >> t)
        if r.shape != expected:
            raise ValueError(f"raw image {t + 1} has shape {r.shape}, expected {expected}")

    skips = []
    x = raw[0]
    for e in range(1, cfg.levels + 1):
        if e > 1:
            x = ad.downsample2x(x)
            if e <= cfg.pyramid_levels:
                x = ad.concat_channels(x, raw[e - 1])
        x = _block(params, f"enc{e}", x)
        skips.append(x)
    x = _block(params, "mid", ad.downsample2x(x))
    for e in range(cfg.levels, 0, -1):
        x = ad.concat_channels(ad.upsample2x(x), skips[e - 1])
        x = _block(params, f"dec{e}", x)
    x = ad.conv2d(x, params["out.w"], params["out.b"], stride=1, padding=0)
    return ad.sigmoid(x)


def pyramid_inputs(pyramid: RawPyramid, desc: ad.Tensor | None = None) -> list[ad.Tensor]:
    """Raw tensors for :func:`forward`; differentiable in ``desc`` when given."""
    if desc is None:
        return [ad.Tensor(level.values) for level in pyramid]
    return [raw_tensor(desc, level) for level in pyramid]


def render(params: RenderNetParams, pyramid: RawPyramid, desc: ad.Tensor | None = None) -> ad.Tensor:
    return forward(params, pyramid_inputs(pyramid, desc))


def save(path: str | Path, params: RenderNetParams) -> None:
    """Checkpoint plus ``<path>.json`` sidecar holding the config."""
    path = Path(path)
    ad.save_checkpoint(path, params.arrays().items())
    Path(str(path) + ".json").write_text(json.dumps(asdict(params.config), indent=1))


def load(path: str | Path) -> RenderNetParams:
    path = Path(path)
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing config sidecar {sidecar}")
    config = RenderNetConfig(**json.loads(sidecar.read_text()))
    arrays = ad.load_checkpoint(path)
    expected = build(config, seed=0)
    if arrays.keys() != expected.keys():
        raise ValueError(f"checkpoint tensors do not match config {config}")
    for k, arr in arrays.items():
        if arr.shape != expected[k].shape:
            raise ValueError(f"checkpoint tensor {k} has shape {arr.shape}, expected {expected[k].shape}")
    return RenderNetParams(config, {k: ad.Tensor(arrays[k], requires_grad=True, name=k) for k in expected})


def render_view(params: RenderNetParams, cloud, table, camera, aa: int = 1) -> np.ndarray:
    """Rasterize ``table`` (per-point features) from ``camera`` and run the network."""
    from .raster import pyramid_cameras, rasterize_aa

    values = table.data if isinstance(table, ad.Tensor) else np.asarray(table)
    cams = pyramid_cameras(camera, params.config.pyramid_levels)
    raw = [ad.Tensor(rasterize_aa(cloud, values, c, aa).values) for c in cams]
    return forward(params, raw).data
