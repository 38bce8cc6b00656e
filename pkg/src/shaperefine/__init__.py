"""Test-time refinement of coarse mesh reconstructions against a silhouette."""
from .camera import CameraPose, ReflectionPlane, reflect_camera, reflect_matrix
from .losses import LossWeights, loss_total
from .mesh import TriangleMesh, load_mesh, save_mesh
from .network import RefineModel
from .optimizer import RefineConfig, RefineError, RefineResult, refine_batch, refine_instance
from .rasterizer import RenderSettings, hard_silhouette, soft_silhouette

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "LossWeights", "RefineConfig", "RefineError", "RefineModel", "RefineResult",
    "ReflectionPlane", "RenderSettings", "TriangleMesh", "hard_silhouette", "load_mesh", "loss_total",
    "reflect_camera", "reflect_matrix", "refine_batch", "refine_instance", "save_mesh", "soft_silhouette",
]
