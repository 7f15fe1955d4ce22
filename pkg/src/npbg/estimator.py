"""scikit-learn style wrapper around building, fitting and rendering."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import fitting as ft
from . import rendernet as rn
from .geometry import Camera
from .raster import DescriptorSet
from .sceneio import SceneDataset, l1, psnr


def evaluate_views(params: rn.RenderNetParams, scene: SceneDataset, table, indices=None,
                   aa: int = 1) -> dict:
    """PSNR and L1 of rendered views (holdout by default) against ground truth."""
    indices = scene.holdout_indices if indices is None else list(indices)
    rows = []
    for i in indices:
        view = scene.views[i]
        out = rn.render_view(params, scene.cloud, table, view.camera, aa=aa)
        rows.append({"view": int(i), "psnr": psnr(out, view.image), "l1": l1(out, view.image)})
    agg = {"count": len(rows), "mean_psnr": None, "median_psnr": None, "mean_l1": None}
    if rows:
        values = [r["psnr"] for r in rows]
        agg.update(mean_psnr=float(np.mean(values)), median_psnr=float(np.median(values)),
                   mean_l1=float(np.mean([r["l1"] for r in rows])))
    return {"views": rows, "aggregate": agg}


class NeuralPointRenderer(BaseEstimator):
    """Rendering network plus per-scene descriptors, fitted jointly.

    ``fit`` takes one scene or a list of scenes. ``predict`` renders cameras
    of a fitted scene and ``score`` returns the median holdout PSNR.
    """

    def __init__(self, levels=5, descriptor_dim=8, base_channels=8, pyramid_levels=4, max_channels=None,
                 lr_net=1e-4, lr_desc=1e-1, steps=2000, crop=64, zoom_range=(0.5, 2.0), loss="l1",
                 point_features="descriptors", aa=1, seed=0):
        self.levels = levels
        self.descriptor_dim = descriptor_dim
        self.base_channels = base_channels
        self.pyramid_levels = pyramid_levels
        self.max_channels = max_channels
        self.lr_net = lr_net
        self.lr_desc = lr_desc
        self.steps = steps
        self.crop = crop
        self.zoom_range = zoom_range
        self.loss = loss
        self.point_features = point_features
        self.aa = aa
        self.seed = seed

    def net_config(self) -> rn.RenderNetConfig:
        m = 3 if self.point_features == "colors" else self.descriptor_dim
        return rn.RenderNetConfig(levels=self.levels, in_channels=m, base_channels=self.base_channels,
                                  pyramid_levels=self.pyramid_levels, max_channels=self.max_channels)

    def fit_config(self, **overrides) -> ft.FitConfig:
        kw = dict(lr_net=self.lr_net, lr_desc=self.lr_desc, steps=self.steps, crop=self.crop,
                  zoom_range=tuple(self.zoom_range), loss_kind=self.loss, seed=self.seed,
                  point_features=self.point_features)
        kw.update(overrides)
        return ft.FitConfig(**kw)

    def fit(self, scenes, y=None, callback=None):
        scenes = [scenes] if isinstance(scenes, SceneDataset) else list(scenes)
        params = rn.build(self.net_config(), seed=self.seed)
        result = ft.fit(scenes, params, self.fit_config(), callback=callback)
        self._store(scenes, result)
        return self

    def finetune(self, scene: SceneDataset, steps=None, lr_net=None, callback=None) -> "NeuralPointRenderer":
        """New estimator fitted to ``scene`` starting from this one's network."""
        check_is_fitted(self, "params_")
        over = {}
        if steps is not None:
            over["steps"] = steps
        if lr_net is not None:
            over["lr_net"] = lr_net
        result = ft.finetune(scene, self.params_, self.fit_config(**over), callback=callback)
        other = NeuralPointRenderer(**self.get_params())
        if steps is not None:
            other.steps = steps
        if lr_net is not None:
            other.lr_net = lr_net
        other._store([scene], result)
        return other

    def _store(self, scenes, result: ft.FitResult) -> None:
        self.scenes_ = scenes
        self.params_ = result.params
        self.descriptors_ = result.descriptors
        self.history_ = np.asarray(result.history)
        self.n_parameters_ = result.params.count()

    def point_table(self, scene_index: int = 0):
        check_is_fitted(self, "params_")
        scene = self.scenes_[scene_index]
        desc: DescriptorSet = self.descriptors_[scene_index]
        return ft.point_table(scene, self.fit_config(), desc)

    def predict(self, cameras, scene_index: int = 0) -> np.ndarray:
        """Images ``[K, 3, H, W]`` for ``cameras`` of fitted scene ``scene_index``."""
        check_is_fitted(self, "params_")
        if isinstance(cameras, Camera):
            cameras = [cameras]
        table = self.point_table(scene_index)
        cloud = self.scenes_[scene_index].cloud
        return np.stack([rn.render_view(self.params_, cloud, table, cam, aa=self.aa) for cam in cameras])

    def evaluate(self, scene_index: int = 0, indices=None) -> dict:
        check_is_fitted(self, "params_")
        return evaluate_views(self.params_, self.scenes_[scene_index], self.point_table(scene_index),
                              indices, aa=self.aa)

    def score(self, X=None, y=None, scene_index: int = 0) -> float:
        """Median holdout PSNR of a fitted scene (``X`` is accepted for API symmetry)."""
        report = self.evaluate(scene_index)
        if not report["views"]:
            raise ValueError("scene has no holdout views to score")
        return report["aggregate"]["median_psnr"]
