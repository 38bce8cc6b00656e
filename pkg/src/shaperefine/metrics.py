"""3D reconstruction metrics and the silhouette 2D IoU."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .camera import CameraPose
from .mesh import TriangleMesh, face_areas
from .rasterizer import hard_silhouette

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 2048
HUNGARIAN_MAX = 256


@dataclass(frozen=True, eq=False)
class PointSample:
    points: np.ndarray
    mesh_id: str = ""
    seed: int = 0

    def __len__(self):
        return len(self.points)


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointSample) else x
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point set is empty")
    return pts


def sample_surface(mesh: TriangleMesh, k: int = DEFAULT_SAMPLES, seed: int = 0) -> PointSample:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.n_faces == 0:
        raise ValueError("mesh has no faces to sample")
    areas = face_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(mesh.n_faces, size=int(k), p=areas / total)
    r1 = np.sqrt(rng.random(int(k)))
    r2 = rng.random(int(k))
    tri = mesh.vertices[mesh.faces[face]]
    pts = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
           + (r1 * r2)[:, None] * tri[:, 2])
    return PointSample(pts, mesh_id=mesh.name, seed=seed)


def nearest_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from every point of ``a`` to its nearest point in ``b``."""
    _, idx = cKDTree(b).query(a, k=1)
    diff = a - b[idx]
    return np.sum(diff * diff, axis=1)


def chamfer_l2(a, b) -> float:
    """Symmetric sum of mean squared nearest-neighbour distances."""
    pa, pb = _points(a), _points(b)
    return float(np.mean(nearest_sq_dist(pa, pb)) + np.mean(nearest_sq_dist(pb, pa)))


def bbox_diagonal(x) -> float:
    pts = _points(x)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def fscore(a, b, tau: float | None = None) -> float:
    """F-score in percent at distance threshold ``tau``.

    ``b`` is the ground truth; ``tau`` defaults to 1% of its bounding-box
    diagonal.
    """
    pa, pb = _points(a), _points(b)
    if tau is None:
        tau = 0.01 * bbox_diagonal(pb)
    if not tau > 0:
        raise ValueError("tau must be positive")
    t2 = tau * tau
    precision = float(np.mean(nearest_sq_dist(pa, pb) <= t2))
    recall = float(np.mean(nearest_sq_dist(pb, pa) <= t2))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def auction_assignment(cost: np.ndarray, rel_tol: float = 1e-3, scale: float = 5.0) -> np.ndarray:
    """Minimum-cost perfect matching by the epsilon-scaling auction method.

    Returns ``assign`` with ``assign[i]`` the column given to row ``i``. The
    matching cost exceeds the optimum by at most ``n * eps_final``, and
    ``eps_final`` is chosen so that this stays within ``rel_tol`` of a lower
    bound on the optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("cost matrix must be square")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    benefit = -cost
    span = float(cost.max() - cost.min())
    lower = float(max(cost.min(axis=1).sum(), cost.min(axis=0).sum()))
    eps_final = max(rel_tol * lower / n, 1e-12 * max(span, 1.0))
    eps = max(span / 4.0, eps_final)
    prices = np.zeros(n)
    rows = np.arange(n)
    while True:
        assign = np.full(n, -1, dtype=np.int64)
        owner = np.full(n, -1, dtype=np.int64)
        free = rows.copy()
        while free.size:
            vals = benefit[free] - prices
            if n > 1:
                top2 = np.argpartition(-vals, 1, axis=1)[:, :2]
                v2 = vals[np.arange(len(free))[:, None], top2]
                first = np.argmax(v2, axis=1)
                best_j = top2[np.arange(len(free)), first]
                best_v = v2[np.arange(len(free)), first]
                second_v = v2[np.arange(len(free)), 1 - first]
            else:
                best_j = np.zeros(len(free), dtype=np.int64)
                best_v = vals[:, 0]
                second_v = best_v
            bids = prices[best_j] + (best_v - second_v) + eps
            # highest bid per object wins; ties to the lowest row
            order = np.lexsort((free, -bids, best_j))
            obj_sorted = best_j[order]
            win = np.r_[True, obj_sorted[1:] != obj_sorted[:-1]]
            win_idx = order[win]
            objs, bidders = best_j[win_idx], free[win_idx]
            prev = owner[objs]
            assign[prev[prev >= 0]] = -1
            owner[objs] = bidders
            assign[bidders] = objs
            prices[objs] = bids[win_idx]
            free = rows[assign < 0]
        if eps <= eps_final:
            return assign
        eps = max(eps / scale, eps_final)


def emd(a, b, method: str = "auto") -> float:
    """Mean Euclidean distance under the optimal bijection of two equal-size sets.

    ``method`` is ``"hungarian"`` (exact), ``"auction"`` or ``"auto"``
    (exact up to 256 points, auction above).
    """
    pa, pb = _points(a), _points(b)
    if len(pa) != len(pb):
        raise ValueError("EMD needs equal-size point sets (%d vs %d)" % (len(pa), len(pb)))
    cost = pairwise_distances(pa, pb)
    if method == "auto":
        method = "hungarian" if len(pa) <= HUNGARIAN_MAX else "auction"
    if method == "hungarian":
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].sum() / len(pa))
    if method == "auction":
        assign = auction_assignment(cost)
        return float(cost[np.arange(len(pa)), assign].sum() / len(pa))
    raise ValueError("unknown EMD method %r" % method)


@numba.njit(cache=True)
def _ray_parity_kernel(tri_uv, tri_t, u0, v0, du, dv, nu, nv, t0, dt, nt, diff):
    for f in range(tri_uv.shape[0]):
        ax, ay = tri_uv[f, 0, 0], tri_uv[f, 0, 1]
        bx, by = tri_uv[f, 1, 0], tri_uv[f, 1, 1]
        cx, cy = tri_uv[f, 2, 0], tri_uv[f, 2, 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0:
            continue
        i0 = max(int(math.ceil((min(ax, min(bx, cx)) - u0) / du)), 0)
        i1 = min(int(math.floor((max(ax, max(bx, cx)) - u0) / du)), nu - 1)
        j0 = max(int(math.ceil((min(ay, min(by, cy)) - v0) / dv)), 0)
        j1 = min(int(math.floor((max(ay, max(by, cy)) - v0) / dv)), nv - 1)
        for i in range(i0, i1 + 1):
            px = u0 + i * du
            for j in range(j0, j1 + 1):
                py = v0 + j * dv
                w0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                w1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                if not ((w0 > 0 and w1 > 0 and w2 > 0) or (w0 < 0 and w1 < 0 and w2 < 0)):
                    continue
                t = (w1 * tri_t[f, 0] + w2 * tri_t[f, 1] + w0 * tri_t[f, 2]) / area2
                # cells with center below t see this hit ahead of them
                m = int(math.ceil((t - t0) / dt))
                if m <= 0:
                    continue
                if m > nt:
                    m = nt
                diff[i, j, 0] += 1
                if m < nt:
                    diff[i, j, m] -= 1


# tiny transverse offsets keep rays off shared triangle edges
_RAY_JITTER = ((3.1e-6, 7.3e-6), (5.9e-6, 2.7e-6), (4.3e-6, 6.1e-6))


def _occupancy_along(mesh: TriangleMesh, axis: int, centers) -> np.ndarray:
    u_ax, v_ax = [a for a in range(3) if a != axis]
    cu, cv, ct = centers[u_ax], centers[v_ax], centers[axis]
    span = max(float(c[-1] - c[0]) if len(c) > 1 else 1.0 for c in centers) or 1.0
    ju, jv = _RAY_JITTER[axis]
    du = cu[1] - cu[0] if len(cu) > 1 else 1.0
    dv = cv[1] - cv[0] if len(cv) > 1 else 1.0
    dt = ct[1] - ct[0] if len(ct) > 1 else 1.0
    tri = mesh.vertices[mesh.faces]
    tri_uv = np.ascontiguousarray(tri[:, :, [u_ax, v_ax]])
    tri_t = np.ascontiguousarray(tri[:, :, axis])
    diff = np.zeros((len(cu), len(cv), len(ct)), dtype=np.int64)
    _ray_parity_kernel(tri_uv, tri_t, cu[0] + ju * span, cv[0] + jv * span, du, dv,
                       len(cu), len(cv), ct[0], dt, len(ct), diff)
    counts = np.cumsum(diff, axis=2)
    occ = (counts % 2) == 1
    order = np.argsort([u_ax, v_ax, axis])
    return np.transpose(occ, order)


def grid_centers(lo, hi, resolution: int):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = np.where(hi > lo, hi - lo, 1.0)
    return [lo[a] + (np.arange(resolution) + 0.5) * size[a] / resolution for a in range(3)]


def occupancy(mesh: TriangleMesh, centers) -> np.ndarray:
    """Inside/outside of grid cell centers by 3-axis ray-parity majority vote."""
    if mesh.n_faces == 0:
        return np.zeros(tuple(len(c) for c in centers), dtype=bool)
    votes = sum(_occupancy_along(mesh, axis, centers).astype(np.int8) for axis in range(3))
    return votes >= 2


def volumetric_iou(mesh_a: TriangleMesh, mesh_b: TriangleMesh, resolution: int = 32) -> float:
    """IoU of occupancy grids over the union bounding box."""
    for m in (mesh_a, mesh_b):
        if m.n_faces and not m.is_closed:
            logger.warning("volumetric_iou: mesh %s is not closed, parity test may be unreliable", m.name)
    verts = [m.vertices for m in (mesh_a, mesh_b) if m.n_vertices]
    if not verts:
        logger.warning("volumetric_iou: both meshes empty")
        return 1.0
    allv = np.vstack(verts)
    centers = grid_centers(allv.min(axis=0), allv.max(axis=0), resolution)
    occ_a, occ_b = occupancy(mesh_a, centers), occupancy(mesh_b, centers)
    union = np.logical_or(occ_a, occ_b).sum()
    if union == 0:
        logger.warning("volumetric_iou: empty occupancy in both meshes")
        return 1.0
    return float(np.logical_and(occ_a, occ_b).sum() / union)


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        logger.warning("mask_iou: empty union")
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def silhouette_iou_2d(mesh: TriangleMesh, pose: CameraPose, silhouette) -> float:
    """IoU between the mesh's hard render and the silhouette thresholded at 0.5."""
    sil = np.asarray(silhouette, dtype=np.float64)
    h, w = sil.shape
    render = hard_silhouette(mesh, pose.with_image_size((w, h)))
    return mask_iou(render, sil > 0.5)


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, samples: int = DEFAULT_SAMPLES,
                    seed: int = 0, resolution: int = 32, tau: float | None = None,
                    pose: CameraPose | None = None, silhouette=None, metrics=None) -> dict:
    """All available metrics for one prediction; keys follow the report columns."""
    wanted = set(metrics or ("emd", "cd", "fscore", "viou", "iou2d"))
    out = {}
    if wanted & {"emd", "cd", "fscore"}:
        pa = sample_surface(pred, samples, seed)
        pb = sample_surface(gt, samples, seed)
        if "cd" in wanted:
            out["cd"] = chamfer_l2(pa, pb)
        if "emd" in wanted:
            out["emd"] = emd(pa, pb)
        if "fscore" in wanted:
            out["fscore"] = fscore(pa, pb, tau)
    if "viou" in wanted:
        out["viou"] = volumetric_iou(pred, gt, resolution)
    if "iou2d" in wanted and pose is not None and silhouette is not None:
        out["iou2d"] = silhouette_iou_2d(pred, pose, silhouette)
    return out
