"""Per-instance test-time refinement loop and batch driver."""
from __future__ import annotations

import concurrent.futures as cf
import contextlib
import logging
import math
import multiprocessing as mp
import time
import traceback
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import autodiff
from .camera import CameraPose, ReflectionPlane
from .losses import TERMS, LossWeights, MeshTopology, loss_total
from .mesh import TriangleMesh
from .network import GraphAdjacency, RefineModel, vertex_sample_grid
from .rasterizer import RenderSettings, hard_silhouette

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("iter", "total") + TERMS + ("iou2d",)


class RefineError(RuntimeError):
    """Raised when an optimization step produces a non-finite loss."""

    def __init__(self, message, terms=None, iteration=None):
        super().__init__(message)
        self.terms = terms or {}
        self.iteration = iteration


@dataclass(frozen=True)
class RefineConfig:
    iterations: int = 400
    lr: float = 7e-5
    weights: LossWeights = LossWeights()
    render_size: tuple = (224, 224)
    encoder_size: tuple = (224, 224)
    sigma: float = 1e-4
    seed: int = 0
    plane: ReflectionPlane = ReflectionPlane()
    keep_best: bool = True
    patience: int | None = None
    log_every: int = 25
    threads: int = 1

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        object.__setattr__(self, "render_size", tuple(int(s) for s in self.render_size))
        object.__setattr__(self, "encoder_size", tuple(int(s) for s in self.encoder_size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        d["plane"] = {"normal": list(self.plane.normal), "offset": self.plane.offset}
        d["render_size"] = list(self.render_size)
        d["encoder_size"] = list(self.encoder_size)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RefineConfig":
        kw = dict(data)
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError("unknown config keys: %s" % ", ".join(sorted(unknown)))
        if "weights" in kw and isinstance(kw["weights"], dict):
            kw["weights"] = LossWeights.from_dict(kw["weights"])
        if "plane" in kw and isinstance(kw["plane"], dict):
            kw["plane"] = ReflectionPlane(tuple(kw["plane"]["normal"]), kw["plane"].get("offset", 0.0))
        return cls(**kw)

    @property
    def settings(self) -> RenderSettings:
        return RenderSettings(sigma=self.sigma, image_size=self.render_size)


@dataclass
class RefineResult:
    mesh: TriangleMesh
    confidences: np.ndarray
    trace: list
    wall_time: float
    iterations: int
    best_iteration: int
    seed: int
    id: str = ""

    @property
    def best_loss(self) -> float:
        return self.trace[self.best_iteration]["total"]

    @property
    def initial_loss(self) -> float:
        return self.trace[0]["total"]


@dataclass
class InstanceFailure:
    index: int
    id: str
    error: str
    message: str
    details: str = field(default="", repr=False)


@contextlib.contextmanager
def _torch_threads(n):
    old = torch.get_num_threads()
    torch.set_num_threads(max(1, int(n)))
    try:
        yield
    finally:
        torch.set_num_threads(old)


def _prepare_target(silhouette, render_size) -> torch.Tensor:
    sil = np.asarray(silhouette, dtype=np.float64)
    if sil.ndim != 2:
        raise ValueError("silhouette must be a 2D array, got shape %s" % (sil.shape,))
    if not np.all(np.isfinite(sil)):
        raise ValueError("silhouette contains non-finite values")
    sil = np.clip(sil, 0.0, 1.0)
    t = torch.from_numpy(sil).float()
    w, h = render_size
    if t.shape != (h, w):
        t = F.interpolate(t[None, None], size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    return t


def _iou(mask_a, mask_b) -> float:
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)


def refine_instance(coarse: TriangleMesh, silhouette, pose: CameraPose,
                    config: RefineConfig = RefineConfig(), instance_index: int = 0,
                    instance_id: str = "") -> RefineResult:
    """Optimize a freshly initialized network so the displaced mesh matches
    the silhouette; returns the lowest-loss iterate when ``keep_best``."""
    if not isinstance(coarse, TriangleMesh):
        raise TypeError("coarse must be a TriangleMesh")
    if coarse.n_vertices == 0:
        raise ValueError("coarse mesh has no vertices")
    if not np.all(np.isfinite(coarse.vertices)):
        raise ValueError("coarse mesh has non-finite vertices")
    seed = int(config.seed) + int(instance_index)
    pose = pose.with_image_size(config.render_size)
    settings = config.settings
    target = _prepare_target(silhouette, config.render_size)
    target_mask = target.numpy() > 0.5
    start = time.perf_counter()

    with _torch_threads(config.threads):
        model = RefineModel(seed=seed, encoder_size=config.encoder_size)
        tape = autodiff.Tape()
        tape.watch(model.named_parameters())
        params = dict(model.named_parameters())
        state = autodiff.AdamState()
        adj = GraphAdjacency.from_mesh(coarse)
        topo = MeshTopology(coarse)
        grid, valid = vertex_sample_grid(coarse.vertices, pose)
        v_coarse = torch.from_numpy(np.array(coarse.vertices, dtype=np.float32))

        trace = []
        best = (math.inf, -1, None, None)
        last = None
        since_best = 0
        for it in range(int(config.iterations)):
            dis, conf = model(target, adj, grid, valid)
            verts = v_coarse + dis
            total, br = loss_total(verts, dis, conf, target, topo, pose, config.weights,
                                   config.plane, settings, coarse=v_coarse)
            if not math.isfinite(br.total):
                bad = {k: v for k, v in br.terms.items() if not math.isfinite(v)}
                logger.error("non-finite loss at iteration %d: %s", it, br.terms)
                raise RefineError("non-finite loss at iteration %d (terms %s)" % (it, bad or br.terms),
                                  terms=br.terms, iteration=it)
            v_now = verts.detach().clone()
            c_now = conf.detach().reshape(-1).clone()
            mask = hard_silhouette(coarse.with_vertices(v_now.double().numpy()), pose)
            row = {"iter": it, "total": br.total}
            row.update({k: br.terms.get(k, math.nan) for k in TERMS})
            row["iou2d"] = _iou(mask, target_mask)
            trace.append(row)
            if config.log_every and it % config.log_every == 0:
                logger.info("iter %d total %.6g %s", it, br.total,
                            " ".join("%s=%.4g" % (k, v) for k, v in br.terms.items()))
            last = (br.total, it, v_now, c_now)
            if br.total < best[0]:
                best = last
                since_best = 0
            else:
                since_best += 1
            if config.patience is not None and since_best >= config.patience:
                logger.info("plateau after %d iterations", it + 1)
                break
            grads = autodiff.backward(tape, total)
            autodiff.adam_step(params, grads, state, lr=config.lr)

    chosen = best if config.keep_best else last
    _, chosen_it, v_final, c_final = chosen
    refined = coarse.with_vertices(v_final.double().numpy())
    return RefineResult(mesh=refined, confidences=c_final.double().numpy(), trace=trace,
                        wall_time=time.perf_counter() - start, iterations=len(trace),
                        best_iteration=chosen_it, seed=seed, id=instance_id)


@dataclass
class RefineTask:
    mesh: TriangleMesh
    silhouette: np.ndarray
    pose: CameraPose
    id: str = ""


def _as_task(item, index) -> RefineTask:
    if isinstance(item, RefineTask):
        return item
    if isinstance(item, dict):
        return RefineTask(item["mesh"], item["silhouette"], item["pose"], item.get("id", str(index)))
    mesh, sil, pose = item[:3]
    return RefineTask(mesh, sil, pose, item[3] if len(item) > 3 else str(index))


def _run_task(args):
    index, item, config = args
    try:
        task = _as_task(item, index)
        return refine_instance(task.mesh, task.silhouette, task.pose, config,
                               instance_index=index, instance_id=task.id or str(index))
    except Exception as exc:  # isolate per-instance failures
        ident = getattr(item, "id", "") or (item.get("id", "") if isinstance(item, dict) else "")
        return InstanceFailure(index=index, id=ident or str(index), error=type(exc).__name__,
                               message=str(exc), details=traceback.format_exc())


def refine_batch(instances, config: RefineConfig = RefineConfig(), parallelism: int = 1,
                 indices=None):
    """Refine independent instances; results keep input order.

    Instance ``i`` is seeded with ``config.seed + i``, where ``i`` is its
    position or ``indices[i]`` when given. Failures are returned as
    :class:`InstanceFailure` entries instead of raising.
    """
    instances = list(instances)
    indices = range(len(instances)) if indices is None else [int(i) for i in indices]
    if len(indices) != len(instances):
        raise ValueError("indices and instances differ in length")
    jobs = [(i, item, config) for i, item in zip(indices, instances)]
    if not jobs:
        return []
    if parallelism <= 1 or len(jobs) == 1:
        return [_run_task(j) for j in jobs]
    ctx = mp.get_context("spawn")
    with cf.ProcessPoolExecutor(max_workers=int(parallelism), mp_context=ctx) as pool:
        return list(pool.map(_run_task, jobs))


def write_trace_csv(trace, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace:
            vals = []
            for col in TRACE_COLUMNS:
                v = row[col]
                vals.append(str(v) if col == "iter" else "%.10g" % v)
            fh.write(",".join(vals) + "\n")


def with_config(config: RefineConfig, **changes) -> RefineConfig:
    return replace(config, **changes)
