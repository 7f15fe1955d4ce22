"""Neural point-based rendering: descriptors on points, rasterized and decoded by a U-Net."""

__version__ = "0.1.0"

from .estimator import NeuralPointRenderer, evaluate_views  # noqa: E402
from .fitting import FitConfig, fit, finetune  # noqa: E402
from .geometry import Camera, PointCloud, RigidTransform  # noqa: E402
from .rendernet import RenderNetConfig  # noqa: E402
from .sceneio import SceneDataset, SynthSpec, generate_synthetic, load_scene, save_scene  # noqa: E402

__all__ = ["Camera", "FitConfig", "NeuralPointRenderer", "PointCloud", "RenderNetConfig", "RigidTransform",
           "SceneDataset", "SynthSpec", "evaluate_views", "finetune", "fit", "generate_synthetic",
           "load_scene", "save_scene"]
