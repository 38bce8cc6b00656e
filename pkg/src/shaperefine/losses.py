"""Refinement losses and their weighted combination.

All losses take torch tensors and are differentiable w.r.t. vertex
positions, displacements and (for the symmetry terms) confidences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .camera import CameraPose, ReflectionPlane, horizontal_flip, reflect_camera, reflect_points
from .rasterizer import RenderSettings, rasterize_attribute, render_soft

RENDER_EPS = 1e-7
NN_CHUNK = 1024

DEFAULT_VIEWS = tuple((float(a), float(e)) for a in (15, 45, 75) for e in (-45, 45))
TERMS = ("sil", "isym", "vsym", "dis", "nc", "lp")


@dataclass(frozen=True)
class LossWeights:
    """Loss weights and the (azimuth, elevation) pairs of the symmetry views."""

    sil: float = 10.0
    isym: float = 80.0
    vsym: float = 20.0
    dis: float = 100.0
    nc: float = 10.0
    lp: float = 10.0
    symb: float = 0.0005
    views: tuple = DEFAULT_VIEWS

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ValueError("loss weight %s must be non-negative" % name)
        if not self.symb > 0:
            raise ValueError("symb must be positive")
        object.__setattr__(self, "views", tuple((float(a), float(e)) for a, e in self.views))

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in TERMS}
        d["symb"] = self.symb
        d["views"] = [list(v) for v in self.views]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "LossWeights":
        known = set(TERMS) | {"symb", "views"}
        unknown = set(data) - known
        if unknown:
            raise ValueError("unknown loss weight keys: %s" % ", ".join(sorted(unknown)))
        kw = dict(data)
        if "views" in kw:
            kw["views"] = tuple(tuple(v) for v in kw["views"])
        return cls(**kw)


class MeshTopology:
    """Index tensors derived once from a mesh's faces."""

    def __init__(self, mesh):
        self.n_vertices = mesh.n_vertices
        self.faces_np = np.ascontiguousarray(mesh.faces)
        self.faces = torch.from_numpy(self.faces_np.copy())
        self.edges = torch.from_numpy(np.array(mesh.edges))
        self.face_pairs = torch.from_numpy(np.array(mesh.face_adjacency))
        deg = np.array(mesh.degree, dtype=np.float64)
        self.degree = torch.from_numpy(deg)
        self.mesh = mesh


def loss_silhouette(target: torch.Tensor, render: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy between a target mask and a soft render."""
    if target.shape != render.shape:
        raise ValueError("silhouette shapes differ: %s vs %s" % (tuple(target.shape), tuple(render.shape)))
    a = target.to(render.dtype)
    b = render.clamp(RENDER_EPS, 1.0 - RENDER_EPS)
    return -(a * torch.log(b) + (1.0 - a) * torch.log(1.0 - b)).mean()


def loss_displacement(dis: torch.Tensor) -> torch.Tensor:
    """Mean squared norm of the per-vertex displacements."""
    if dis.numel() == 0:
        return dis.new_zeros(())
    return (dis * dis).sum(dim=1).mean()


def torch_face_normals(verts: torch.Tensor, faces: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    tri = verts[faces]
    n = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=1)
    return n / n.norm(dim=1, keepdim=True).clamp_min(eps)


def loss_normal_consistency(verts: torch.Tensor, topo: MeshTopology) -> torch.Tensor:
    """Mean of ``1 - cos`` between normals of faces sharing an edge."""
    if len(topo.face_pairs) == 0:
        return verts.new_zeros(())
    n = torch_face_normals(verts, topo.faces)
    a, b = n[topo.face_pairs[:, 0]], n[topo.face_pairs[:, 1]]
    return (1.0 - (a * b).sum(dim=1)).mean()


def torch_uniform_laplacian(verts: torch.Tensor, topo: MeshTopology) -> torch.Tensor:
    e = topo.edges
    acc = torch.zeros_like(verts)
    acc = acc.index_add(0, e[:, 0], verts[e[:, 1]]).index_add(0, e[:, 1], verts[e[:, 0]])
    deg = topo.degree.to(verts.dtype)
    mean = acc / deg.clamp_min(1.0)[:, None]
    return torch.where((deg > 0)[:, None], mean - verts, torch.zeros_like(verts))


def loss_laplacian(verts: torch.Tensor, topo: MeshTopology, before=None) -> torch.Tensor:
    """Mean squared uniform-Laplacian magnitude of the refined positions.

    ``before`` (coarse positions) is only checked for matching topology.
    """
    if before is not None and tuple(before.shape) != tuple(verts.shape):
        raise ValueError("meshes before and after refinement differ in vertex count")
    if verts.shape[0] != topo.n_vertices:
        raise ValueError("vertex count does not match topology")
    delta = torch_uniform_laplacian(verts, topo)
    return (delta * delta).sum(dim=1).mean()


def nearest_indices(queries: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Exact nearest neighbour of every query, lowest index on ties."""
    q = queries.detach()
    p = points.detach()
    out = []
    for start in range(0, len(q), NN_CHUNK):
        chunk = q[start:start + NN_CHUNK]
        d = ((chunk[:, None, :] - p[None, :, :]) ** 2).sum(dim=-1)
        out.append(torch.argmin(d, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def loss_vertex_symmetry(verts: torch.Tensor, conf: torch.Tensor, plane: ReflectionPlane,
                         symb: float) -> torch.Tensor:
    """Confidence-weighted distance from each mirrored vertex to its nearest
    vertex, plus the ``symb * ln(1/conf)`` barrier, averaged over vertices."""
    if verts.shape[0] == 0:
        raise ValueError("vertex symmetry loss needs at least one vertex")
    sigma = conf.reshape(-1)
    tv = reflect_points(verts, plane)
    idx = nearest_indices(tv, verts)
    d = ((tv - verts[idx]) ** 2).sum(dim=1)
    return (sigma * d - symb * torch.log(sigma)).mean()


def symmetry_poses(views, pose: CameraPose, image_size=None):
    """Cameras at the given (azimuth, elevation) pairs sharing ``pose``'s
    distance, field of view and target."""
    size = tuple(image_size) if image_size is not None else pose.image_size
    return [CameraPose(azimuth=a, elevation=e, distance=pose.distance, fov_y=pose.fov_y,
                       image_size=size, look_at=pose.look_at, up=pose.up) for a, e in views]


def confidence_map(topo: MeshTopology, verts: torch.Tensor, conf: torch.Tensor,
                   pose: CameraPose) -> torch.Tensor:
    """Pixel confidences under ``pose`` (uncovered pixels are 1), no gradient."""
    vals = rasterize_attribute(topo.mesh, pose, conf.detach().reshape(-1).double().numpy(),
                               vertices=verts.detach().double().numpy(), background=1.0)
    return torch.from_numpy(vals).to(verts.dtype)


def loss_image_symmetry(verts: torch.Tensor, conf: torch.Tensor, topo: MeshTopology, poses,
                        plane: ReflectionPlane, symb: float,
                        settings: RenderSettings = RenderSettings()) -> torch.Tensor:
    """Mean over views and pixels of ``s * (h(R_p) - R_Tp)^2 + symb ln(1/s)``.

    ``R_p`` is the soft render at a view, ``R_Tp`` the render from the
    mirrored camera, ``h`` the horizontal flip and ``s`` the rasterized
    vertex confidence, flipped to line up with ``h(R_p)``.
    """
    if not poses:
        return verts.new_zeros(())
    total = verts.new_zeros(())
    for p in poses:
        p = settings.pose_for(p)
        r1 = render_soft(verts, topo.faces_np, p, settings)
        r2 = render_soft(verts, topo.faces_np, reflect_camera(p, plane), settings)
        s = horizontal_flip(confidence_map(topo, verts, conf, p))
        pix = s * (horizontal_flip(r1) - r2) ** 2 - symb * torch.log(s)
        total = total + pix.mean()
    return total / len(poses)


@dataclass
class LossBreakdown:
    total: float
    terms: dict = field(default_factory=dict)

    def row(self):
        return [self.total] + [self.terms.get(k, math.nan) for k in TERMS]


def loss_total(verts, dis, conf, target, topo: MeshTopology, pose: CameraPose,
               weights: LossWeights, plane: ReflectionPlane = ReflectionPlane(),
               settings: RenderSettings = RenderSettings(), coarse=None):
    """Weighted sum of the six losses.

    Returns ``(total tensor, LossBreakdown)``. Terms whose weight is zero are
    not evaluated and appear as NaN in the breakdown.
    """
    pieces = {}
    if weights.sil:
        render = render_soft(verts, topo.faces_np, pose, settings)
        pieces["sil"] = loss_silhouette(target, render)
    if weights.isym and weights.views:
        poses = symmetry_poses(weights.views, pose, settings.image_size)
        pieces["isym"] = loss_image_symmetry(verts, conf, topo, poses, plane, weights.symb, settings)
    elif weights.isym:
        pieces["isym"] = verts.new_zeros(())
    if weights.vsym:
        pieces["vsym"] = loss_vertex_symmetry(verts, conf, plane, weights.symb)
    if weights.dis:
        pieces["dis"] = loss_displacement(dis)
    if weights.nc:
        pieces["nc"] = loss_normal_consistency(verts, topo)
    if weights.lp:
        pieces["lp"] = loss_laplacian(verts, topo, coarse)
    total = verts.new_zeros(())
    for name, value in pieces.items():
        total = total + getattr(weights, name) * value
    breakdown = LossBreakdown(float(total.detach()), {k: float(v.detach()) for k, v in pieces.items()})
    return total, breakdown


def with_weights(weights: LossWeights, **changes) -> LossWeights:
    return replace(weights, **changes)
