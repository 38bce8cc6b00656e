"""Soft silhouette rasterizer with an analytic backward pass.

Each face contributes ``D_f = sigmoid(s_f * d_f^2 / sigma)`` to a pixel,
where ``d_f`` is the 2D distance from the pixel center to the projected
triangle and ``s_f`` is +1 inside, -1 outside. Contributions are combined
as ``1 - prod_f (1 - D_f)``, evaluated in log space as
``1 - exp(-sum_f softplus(s_f d_f^2 / sigma))``.

``sigma`` is expressed in normalized image units where the image height
spans [-1, 1]. Only pixels inside a face's bounding box grown by
``sqrt(cutoff * sigma)`` are evaluated for that face; the skipped terms are
below ``exp(-cutoff)``. Kernels loop over faces in index order, so results
are deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
import torch

from .camera import CameraPose, project_points


@dataclass(frozen=True)
class RenderSettings:
    sigma: float = 1e-4
    image_size: tuple | None = None
    background: float = 0.0
    cutoff: float = 40.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.image_size is not None:
            object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))

    def pose_for(self, pose: CameraPose) -> CameraPose:
        if self.image_size is None or tuple(self.image_size) == pose.image_size:
            return pose
        return pose.with_image_size(self.image_size)


def _sigma_px(sigma: float, height: int) -> float:
    return sigma * (height / 2.0) ** 2


@numba.njit(cache=True)
def _bbox(tri, f, width, height, margin):
    ax, ay = tri[f, 0, 0], tri[f, 0, 1]
    bx, by = tri[f, 1, 0], tri[f, 1, 1]
    cx, cy = tri[f, 2, 0], tri[f, 2, 1]
    lo_x = min(ax, min(bx, cx))
    hi_x = max(ax, max(bx, cx))
    lo_y = min(ay, min(by, cy))
    hi_y = max(ay, max(by, cy))
    if not (np.isfinite(lo_x) and np.isfinite(hi_x) and np.isfinite(lo_y) and np.isfinite(hi_y)):
        return 0, -1, 0, -1
    x0 = max(int(math.ceil(lo_x - margin - 0.5)), 0)
    x1 = min(int(math.floor(hi_x + margin - 0.5)), width - 1)
    y0 = max(int(math.ceil(lo_y - margin - 0.5)), 0)
    y1 = min(int(math.floor(hi_y + margin - 0.5)), height - 1)
    return x0, x1, y0, y1


@numba.njit(cache=True)
def _seg(px, py, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    denom = ex * ex + ey * ey
    t = 0.0
    if denom > 0:
        t = ((px - ax) * ex + (py - ay) * ey) / denom
        t = min(max(t, 0.0), 1.0)
    rx = px - (ax + t * ex)
    ry = py - (ay + t * ey)
    return rx * rx + ry * ry, t, rx, ry


@numba.njit(cache=True)
def _pair(tri, f, px, py):
    """Squared distance, inside sign, active edge and its parameters."""
    ax, ay = tri[f, 0, 0], tri[f, 0, 1]
    bx, by = tri[f, 1, 0], tri[f, 1, 1]
    cx, cy = tri[f, 2, 0], tri[f, 2, 1]
    d2, t, rx, ry = _seg(px, py, ax, ay, bx, by)
    edge = 0
    d2b, tb, rxb, ryb = _seg(px, py, bx, by, cx, cy)
    if d2b < d2:
        d2, t, rx, ry, edge = d2b, tb, rxb, ryb, 1
    d2c, tc, rxc, ryc = _seg(px, py, cx, cy, ax, ay)
    if d2c < d2:
        d2, t, rx, ry, edge = d2c, tc, rxc, ryc, 2
    w0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    w1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
    w2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
    inside = (w0 > 0 and w1 > 0 and w2 > 0) or (w0 < 0 and w1 < 0 and w2 < 0)
    sign = 1.0 if inside else -1.0
    return d2, sign, edge, t, rx, ry


@numba.njit(cache=True)
def _softplus(z):
    if z > 0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


@numba.njit(cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _soft_forward_kernel(tri, width, height, sig, margin, cutoff, acc):
    for f in range(tri.shape[0]):
        x0, x1, y0, y1 = _bbox(tri, f, width, height, margin)
        for iy in range(y0, y1 + 1):
            for ix in range(x0, x1 + 1):
                d2, sign, _, _, _, _ = _pair(tri, f, ix + 0.5, iy + 0.5)
                z = sign * d2 / sig
                if z < -cutoff:
                    continue
                acc[iy * width + ix] += _softplus(z)


@numba.njit(cache=True)
def _soft_backward_kernel(tri, faces, width, height, sig, margin, cutoff, grad_acc, grad):
    for f in range(tri.shape[0]):
        x0, x1, y0, y1 = _bbox(tri, f, width, height, margin)
        for iy in range(y0, y1 + 1):
            for ix in range(x0, x1 + 1):
                g = grad_acc[iy * width + ix]
                if g == 0:
                    continue
                d2, sign, edge, t, rx, ry = _pair(tri, f, ix + 0.5, iy + 0.5)
                z = sign * d2 / sig
                if z < -cutoff:
                    continue
                g_d2 = g * _sigmoid(z) * sign / sig
                va = faces[f, edge]
                vb = faces[f, (edge + 1) % 3]
                cx = -2.0 * g_d2 * rx
                cy = -2.0 * g_d2 * ry
                grad[va, 0] += cx * (1.0 - t)
                grad[va, 1] += cy * (1.0 - t)
                grad[vb, 0] += cx * t
                grad[vb, 1] += cy * t


class _SoftSilhouetteFn(torch.autograd.Function):
    """Custom node: projected 2D vertices ``(N, 2)`` -> soft silhouette ``(H, W)``."""

    @staticmethod
    def forward(ctx, verts2d, faces, width, height, sigma, cutoff):
        sig = _sigma_px(sigma, height)
        margin = math.sqrt(cutoff * sig)
        v = verts2d.detach().numpy()
        tri = np.ascontiguousarray(v[faces])
        acc = np.zeros(height * width, dtype=v.dtype)
        _soft_forward_kernel(tri, width, height, sig, margin, cutoff, acc)
        acc_t = torch.from_numpy(acc)
        ctx.save_for_backward(acc_t)
        ctx.tri, ctx.faces = tri, faces
        ctx.n_vertices, ctx.shape, ctx.sig, ctx.margin = len(v), (width, height), sig, margin
        ctx.cutoff = cutoff
        return (-torch.expm1(-acc_t)).reshape(height, width)

    @staticmethod
    def backward(ctx, grad_out):
        (acc,) = ctx.saved_tensors
        width, height = ctx.shape
        grad_acc = (grad_out.reshape(-1).to(acc.dtype) * torch.exp(-acc)).contiguous().numpy()
        grad = np.zeros((ctx.n_vertices, 2), dtype=ctx.tri.dtype)
        _soft_backward_kernel(ctx.tri, ctx.faces, width, height, ctx.sig, ctx.margin, ctx.cutoff,
                              grad_acc, grad)
        return torch.from_numpy(grad), None, None, None, None, None


def soft_rasterize(verts2d: torch.Tensor, faces: np.ndarray, image_size, sigma: float = 1e-4,
                   cutoff: float = 40.0) -> torch.Tensor:
    """Differentiable soft silhouette from 2D pixel-space vertices."""
    width, height = (int(s) for s in image_size)
    faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        return torch.zeros(height, width, dtype=verts2d.dtype) + 0.0 * verts2d.sum()
    return _SoftSilhouetteFn.apply(verts2d, faces, width, height, float(sigma), float(cutoff))


def _visible_faces(depth, faces, near):
    valid = depth > near
    if not len(faces):
        return faces
    return faces[np.all(valid[faces], axis=1)]


def render_soft(verts: torch.Tensor, faces: np.ndarray, pose: CameraPose,
                settings: RenderSettings = RenderSettings()) -> torch.Tensor:
    """Soft silhouette of world-space vertices, differentiable w.r.t. ``verts``.

    Faces with a vertex closer than the near plane are skipped.
    """
    pose = settings.pose_for(pose)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    xyz = project_points(verts, pose)
    faces_ok = _visible_faces(xyz[:, 2].detach().numpy(), faces, pose.near)
    return soft_rasterize(xyz[:, :2], faces_ok, pose.image_size, settings.sigma, settings.cutoff)


def soft_silhouette(mesh, pose: CameraPose, settings: RenderSettings = RenderSettings()) -> np.ndarray:
    """Soft silhouette image ``(H, W)`` of a mesh, float64 values in [0, 1)."""
    verts = torch.from_numpy(np.array(mesh.vertices, dtype=np.float64))
    with torch.no_grad():
        return render_soft(verts, mesh.faces, pose, settings).numpy()


def silhouette_vjp(mesh, pose: CameraPose, settings: RenderSettings, upstream) -> np.ndarray:
    """Gradient of ``sum(upstream * soft_silhouette)`` w.r.t. vertex positions."""
    verts = torch.tensor(np.array(mesh.vertices, dtype=np.float64), requires_grad=True)
    img = render_soft(verts, mesh.faces, pose, settings)
    up = torch.as_tensor(np.asarray(upstream, dtype=np.float64))
    if up.shape != img.shape:
        raise ValueError("upstream shape %s does not match image %s" % (tuple(up.shape), tuple(img.shape)))
    (grad,) = torch.autograd.grad((img * up).sum(), verts, allow_unused=True)
    if grad is None:
        return np.zeros_like(mesh.vertices)
    return grad.numpy()


@numba.njit(cache=True)
def _hard_kernel(tri, inv_depth_tri, attr_tri, width, height, best_inv, value, covered):
    for f in range(tri.shape[0]):
        ax, ay = tri[f, 0, 0], tri[f, 0, 1]
        bx, by = tri[f, 1, 0], tri[f, 1, 1]
        cx, cy = tri[f, 2, 0], tri[f, 2, 1]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area2 == 0 or not np.isfinite(area2):
            continue
        x0, x1, y0, y1 = _bbox(tri, f, width, height, 0.0)
        for iy in range(y0, y1 + 1):
            py = iy + 0.5
            for ix in range(x0, x1 + 1):
                px = ix + 0.5
                w0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                w1 = (cx - bx) * (py - by) - (cy - by) * (px - bx)
                w2 = (ax - cx) * (py - cy) - (ay - cy) * (px - cx)
                if not ((w0 >= 0 and w1 >= 0 and w2 >= 0) or (w0 <= 0 and w1 <= 0 and w2 <= 0)):
                    continue
                la, lb, lc = w1 / area2, w2 / area2, w0 / area2
                inv = la * inv_depth_tri[f, 0] + lb * inv_depth_tri[f, 1] + lc * inv_depth_tri[f, 2]
                k = iy * width + ix
                # strict comparison keeps the lowest face index on ties
                if not covered[k] or inv > best_inv[k]:
                    covered[k] = True
                    best_inv[k] = inv
                    # offset form reproduces a constant attribute exactly
                    a0 = attr_tri[f, 0]
                    value[k] = a0 + lb * (attr_tri[f, 1] - a0) + lc * (attr_tri[f, 2] - a0)


def _rasterize_hard(verts, faces, pose, attr=None):
    xyz = project_points(np.asarray(verts, dtype=np.float64), pose)
    faces = _visible_faces(xyz[:, 2], np.asarray(faces, dtype=np.int64).reshape(-1, 3), pose.near)
    width, height = pose.image_size
    covered = np.zeros(width * height, dtype=np.bool_)
    best = np.zeros(width * height)
    value = np.zeros(width * height)
    if attr is None:
        attr = np.zeros(len(xyz))
    if len(faces):
        tri = np.ascontiguousarray(xyz[:, :2][faces])
        inv = np.ascontiguousarray((1.0 / xyz[:, 2])[faces])
        _hard_kernel(tri, inv, np.ascontiguousarray(attr[faces]), width, height, best, value, covered)
    return covered.reshape(height, width), value.reshape(height, width)


def hard_silhouette(mesh, pose: CameraPose, image_size=None) -> np.ndarray:
    """Binary coverage of pixel centers by any projected face."""
    if image_size is not None:
        pose = pose.with_image_size(image_size)
    covered, _ = _rasterize_hard(mesh.vertices, mesh.faces, pose)
    return covered


def rasterize_attribute(mesh, pose: CameraPose, vertex_attr, image_size=None,
                        background: float = 1.0, vertices=None) -> np.ndarray:
    """Z-buffered barycentric interpolation of a per-vertex scalar.

    Covered pixels take the value of the front-most face interpolated at
    the pixel center; uncovered pixels get ``background``. ``vertices``
    overrides the mesh positions (used for refined meshes).
    """
    if image_size is not None:
        pose = pose.with_image_size(image_size)
    verts = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    attr = np.asarray(vertex_attr, dtype=np.float64).reshape(-1)
    if len(attr) != len(verts):
        raise ValueError("attribute length %d does not match %d vertices" % (len(attr), len(verts)))
    covered, value = _rasterize_hard(verts, mesh.faces, pose, attr)
    return np.where(covered, value, float(background))
