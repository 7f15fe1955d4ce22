"""Joint optimisation of network weights and per-scene descriptors."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import rendernet as rn
from .geometry import Camera, camera_crop, camera_scale
from .raster import DescriptorSet, pyramid_cameras, zbuffer_levels

logger = logging.getLogger(__name__)

LOSS_KINDS = ("l1", "mse", "fixed_feature")
POINT_FEATURES = ("descriptors", "colors")


@dataclass(frozen=True)
class FitConfig:
    lr_net: float = 1e-4
    lr_desc: float = 1e-1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    crop: int = 64
    zoom_range: tuple[float, float] = (0.5, 2.0)
    loss_kind: str = "l1"
    seed: int = 0
    point_features: str = "descriptors"

    def __post_init__(self):
        object.__setattr__(self, "zoom_range", tuple(float(z) for z in self.zoom_range))
        if self.lr_net < 0 or self.lr_desc < 0:
            raise ValueError("learning rates must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.crop < 1:
            raise ValueError("crop must be positive")
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ValueError(f"zoom range must satisfy 0 < lo <= hi, got {self.zoom_range}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.point_features not in POINT_FEATURES:
            raise ValueError(f"point_features must be one of {POINT_FEATURES}, got {self.point_features!r}")


# losses -------------------------------------------------------------------------

FEATURE_SEED = 20190710
_FEATURE_WIDTHS = (8, 16, 32)


def feature_stack(seed: int = FEATURE_SEED, dtype=np.float32) -> list[tuple[ad.Tensor, ...]]:
    """Frozen random gated-conv layers used by the ``fixed_feature`` loss."""
    rng = np.random.default_rng(seed)
    layers = []
    c_in = 3
    for c_out in _FEATURE_WIDTHS:
        bound = np.sqrt(6.0 / (c_in * 9))
        fw, gw = (ad.Tensor(rng.uniform(-bound, bound, (c_out, c_in, 3, 3)).astype(dtype)) for _ in range(2))
        zeros = ad.Tensor(np.zeros(c_out, dtype=dtype))
        layers.append((fw, gw, zeros, zeros))
        c_in = c_out
    return layers


_stacks: dict = {}


def _features(x: ad.Tensor) -> list[ad.Tensor]:
    key = x.dtype.str
    if key not in _stacks:
        _stacks[key] = feature_stack(dtype=x.dtype)
    feats = []
    for i, layer in enumerate(_stacks[key]):
        if i:
            x = ad.downsample2x(x)
        x = ad.gated_conv(x, *layer, stride=1, padding=1)
        feats.append(x)
    return feats


def loss(rendered: ad.Tensor, target: ad.Tensor, kind: str = "l1") -> ad.Tensor:
    if rendered.shape != target.shape:
        raise ValueError(f"loss: shape mismatch {rendered.shape} vs {target.shape}")
    if kind == "l1":
        return ad.mean(ad.absolute(ad.sub(rendered, target)))
    if kind == "mse":
        diff = ad.sub(rendered, target)
        return ad.mean(ad.mul(diff, diff))
    if kind == "fixed_feature":
        total = None
        for fa, fb in zip(_features(rendered), _features(target)):
            term = ad.mean(ad.absolute(ad.sub(fa, fb)))
            total = term if total is None else ad.add(total, term)
        return total
    raise ValueError(f"unknown loss kind {kind!r}")


# optimiser ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Mapping[str, ad.Tensor], state: AdamState, config: FitConfig,
              descriptors: Mapping[str, ad.Tensor] | None = None) -> AdamState:
    """One bias-corrected ADAM update, in place.

    ``params`` use ``lr_net`` and ``descriptors`` use ``lr_desc``. Moments and
    bias correction are tracked per tensor so a descriptor set that is only
    sampled occasionally still gets a correct correction.
    """
    groups = [(params, config.lr_net), (descriptors or {}, config.lr_desc)]
    for tensors, _ in groups:
        for name, tensor in tensors.items():
            if tensor.grad is None:
                raise ValueError(f"missing gradient for {name!r}")
    b1, b2, eps = config.beta1, config.beta2, config.eps
    for tensors, lr in groups:
        for name, tensor in tensors.items():
            g = tensor.grad
            if name not in state.m:
                state.m[name] = np.zeros_like(tensor.data)
                state.v[name] = np.zeros_like(tensor.data)
                state.t[name] = 0
            m, v = state.m[name], state.v[name]
            t = state.t[name] = state.t[name] + 1
            tmp = np.empty_like(m)
            np.multiply(g, 1 - b1, out=tmp)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1 - b2
            v *= b2
            v += tmp
            if lr == 0:
                continue
            # lr * m_hat / (sqrt(v_hat) + eps) with the bias corrections folded into scalars
            np.sqrt(v, out=tmp)
            tmp *= 1 / np.sqrt(1 - b2 ** t)
            tmp += eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / (1 - b1 ** t)
            tensor.data -= tmp
    state.step += 1
    return state


# batches --------------------------------------------------------------------------

@dataclass(frozen=True)
class Batch:
    camera: Camera
    target: np.ndarray
    view: int
    zoom: float
    offset: tuple[int, int]


def resample_view(image: np.ndarray, zoom: float, ox: int, oy: int, width: int, height: int) -> np.ndarray:
    """Bilinear crop of ``image`` after scaling it by ``zoom``; zero outside."""
    if zoom == 1.0 and 0 <= ox and 0 <= oy and ox + width <= image.shape[2] and oy + height <= image.shape[1]:
        return image[:, oy:oy + height, ox:ox + width].copy()
    u = (np.arange(width) + ox + 0.5) / zoom - 0.5
    v = (np.arange(height) + oy + 0.5) / zoom - 0.5
    vv, uu = np.meshgrid(v, u, indexing="ij")
    return np.stack([ndimage.map_coordinates(ch, [vv, uu], order=1, mode="constant", cval=0.0)
                     for ch in image]).astype(image.dtype)


def make_batch(scene, config: FitConfig, rng: np.random.Generator) -> Batch:
    """Random training view with random zoom and crop."""
    train = scene.train_indices
    if not train:
        raise ValueError("scene has no training views")
    view = int(train[rng.integers(len(train))])
    cam = scene.views[view].camera
    image = scene.views[view].image
    lo, hi = config.zoom_range
    zoom = float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if hi > lo else lo
    zoomed = camera_scale(cam, zoom)
    crop = config.crop
    if crop > min(cam.width, cam.height):
        raise ValueError(f"crop {crop} exceeds image extents {cam.width}x{cam.height}")

    def offset(extent: int) -> int:
        slack = extent - crop
        return int(rng.integers(min(0, slack), max(0, slack) + 1))

    ox, oy = offset(zoomed.width), offset(zoomed.height)
    camera = camera_crop(zoomed, ox, oy, crop, crop)
    target = resample_view(image, zoom, ox, oy, crop, crop)
    return Batch(camera, target, view, zoom, (ox, oy))


# fitting ---------------------------------------------------------------------------

@dataclass
class FitResult:
    params: rn.RenderNetParams
    descriptors: list[DescriptorSet]
    history: list[float]
    state: AdamState


def point_table(scene, config: FitConfig, desc: DescriptorSet | None) -> ad.Tensor:
    if config.point_features == "colors":
        if scene.cloud.colors is None:
            raise ValueError("point_features='colors' needs a colored point cloud")
        return ad.Tensor(scene.cloud.colors.astype(np.float32))
    return desc.tensor


def _validate(scenes: Sequence, params: rn.RenderNetParams, config: FitConfig) -> None:
    if not scenes:
        raise ValueError("fit needs at least one scene")
    cfg = params.config
    step = 2 ** cfg.levels
    if config.crop % step:
        raise ValueError(f"config/params mismatch: crop {config.crop} is not divisible by 2^{cfg.levels}")
    want = 3 if config.point_features == "colors" else cfg.in_channels
    if want != cfg.in_channels:
        raise ValueError(f"config/params mismatch: network takes {cfg.in_channels} channels, "
                         f"point features have {want}")
    for k, scene in enumerate(scenes):
        scene.validate()
        if not scene.train_indices:
            raise ValueError(f"scene {k} has no training views")


def fit(scenes: Sequence, params: rn.RenderNetParams, config: FitConfig,
        descriptors: Sequence[DescriptorSet] | None = None,
        callback: Callable[[int, float, "FitResult"], None] | None = None) -> FitResult:
    """Optimise the rendering loss over ``params`` and one descriptor set per scene.

    Descriptor sets start at zero unless given. ``params`` is updated in
    place; pass a copy to keep the original.
    """
    _validate(scenes, params, config)
    m = params.config.in_channels
    if descriptors is None:
        descriptors = [DescriptorSet.zeros(len(s.cloud), m) for s in scenes]
    descriptors = list(descriptors)
    for k, (scene, desc) in enumerate(zip(scenes, descriptors)):
        if desc.n != len(scene.cloud) or desc.m != m:
            raise ValueError(f"descriptor set {k} is {desc.n}x{desc.m}, expected {len(scene.cloud)}x{m}")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    history: list[float] = []
    result = FitResult(params, descriptors, history, state)
    levels = params.config.pyramid_levels
    train_desc = config.point_features == "descriptors"

    for step in range(config.steps):
        k = int(rng.integers(len(scenes)))
        scene = scenes[k]
        batch = make_batch(scene, config, rng)
        table = point_table(scene, config, descriptors[k])
        winners = [w for w, _ in zbuffer_levels(scene.cloud, pyramid_cameras(batch.camera, levels))]
        try:
            with ad.Tape():
                raw = [ad.gather_rows(table, w) for w in winners]
                out = rn.forward(params, raw)
                value = loss(out, ad.Tensor(batch.target), config.loss_kind)
            ad.backward(value)
        except FloatingPointError as exc:
            raise FloatingPointError(f"non-finite value at step {step}: {exc}") from exc
        history.append(value.item())
        if not np.isfinite(history[-1]):
            raise FloatingPointError(f"non-finite loss at step {step}")
        named = {f"scene{k}": table} if train_desc else None
        adam_step(params, state, config, named)
        if callback is not None:
            callback(step, history[-1], result)
        if step % 100 == 0:
            logger.debug("step %d loss %.5f", step, history[-1])
    return result


def finetune(scene, params: rn.RenderNetParams, config: FitConfig,
             callback: Callable | None = None) -> FitResult:
    """Fit a fresh zero descriptor set and a copy of ``params`` to one scene."""
    return fit([scene], params.copy(), config, callback=callback)
