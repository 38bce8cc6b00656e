"""Scikit-learn style wrapper around the refinement loop.

Refinement is fit at test time per instance, so :meth:`ShapeRefiner.fit`
only validates hyperparameters; :meth:`transform` runs the optimization.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .camera import CameraPose
from .losses import LossWeights
from .mesh import TriangleMesh
from .metrics import chamfer_l2, sample_surface
from .optimizer import InstanceFailure, RefineConfig, RefineTask, refine_batch


def check_mesh(mesh) -> TriangleMesh:
    if not isinstance(mesh, TriangleMesh):
        raise TypeError("expected a TriangleMesh, got %s" % type(mesh).__name__)
    if mesh.n_vertices == 0 or mesh.n_faces == 0:
        raise ValueError("mesh %r is empty" % mesh.name)
    if not np.all(np.isfinite(mesh.vertices)):
        raise ValueError("mesh %r has non-finite vertices" % mesh.name)
    return mesh


def check_silhouette(silhouette) -> np.ndarray:
    sil = np.asarray(silhouette, dtype=np.float64)
    if sil.ndim != 2 or min(sil.shape) == 0:
        raise ValueError("silhouette must be a non-empty 2D array, got shape %s" % (sil.shape,))
    if not np.all(np.isfinite(sil)):
        raise ValueError("silhouette contains non-finite values")
    if sil.min() < 0 or sil.max() > 1:
        raise ValueError("silhouette values must lie in [0, 1]")
    return sil


def check_pose(pose) -> CameraPose:
    if not isinstance(pose, CameraPose):
        raise TypeError("expected a CameraPose, got %s" % type(pose).__name__)
    return pose


def check_instances(X) -> list:
    tasks = []
    for i, item in enumerate(X):
        if isinstance(item, RefineTask):
            mesh, sil, pose, ident = item.mesh, item.silhouette, item.pose, item.id
        elif isinstance(item, dict):
            mesh, sil, pose, ident = item["mesh"], item["silhouette"], item["pose"], item.get("id", "")
        else:
            mesh, sil, pose = item[:3]
            ident = item[3] if len(item) > 3 else ""
        tasks.append(RefineTask(check_mesh(mesh), check_silhouette(sil), check_pose(pose),
                                ident or str(i)))
    if not tasks:
        raise ValueError("no instances given")
    return tasks


class ShapeRefiner(TransformerMixin, BaseEstimator):
    """Refines coarse meshes against their silhouettes.

    ``X`` is a sequence of ``(mesh, silhouette, pose)`` tuples, dicts or
    :class:`RefineTask` objects. :meth:`transform` returns refined meshes;
    the full per-instance results are kept in ``results_``.
    """

    def __init__(self, iterations=400, lr=7e-5, weights=None, render_size=(224, 224),
                 encoder_size=(224, 224), sigma=1e-4, seed=0, keep_best=True, n_jobs=1):
        self.iterations = iterations
        self.lr = lr
        self.weights = weights
        self.render_size = render_size
        self.encoder_size = encoder_size
        self.sigma = sigma
        self.seed = seed
        self.keep_best = keep_best
        self.n_jobs = n_jobs

    def _config(self) -> RefineConfig:
        weights = self.weights if self.weights is not None else LossWeights()
        if isinstance(weights, dict):
            weights = LossWeights.from_dict(weights)
        return RefineConfig(iterations=self.iterations, lr=self.lr, weights=weights,
                            render_size=self.render_size, encoder_size=self.encoder_size,
                            sigma=self.sigma, seed=self.seed, keep_best=self.keep_best)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        if X is not None:
            check_instances(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        tasks = check_instances(X)
        self.results_ = refine_batch(tasks, self.config_, parallelism=self.n_jobs)
        failed = [r for r in self.results_ if isinstance(r, InstanceFailure)]
        if failed:
            f = failed[0]
            raise RuntimeError("%d of %d instances failed; first %s: %s: %s"
                               % (len(failed), len(tasks), f.id, f.error, f.message))
        return [r.mesh for r in self.results_]

    def score(self, X, y, samples=2048):
        """Negative mean Chamfer-l2 of the refined meshes to ground truth ``y``."""
        meshes = self.transform(X)
        y = [check_mesh(m) for m in y]
        if len(y) != len(meshes):
            raise ValueError("got %d ground-truth meshes for %d instances" % (len(y), len(meshes)))
        cds = [chamfer_l2(sample_surface(m, samples, self.seed), sample_surface(g, samples, self.seed))
               for m, g in zip(meshes, y)]
        return -float(np.mean(cds))
