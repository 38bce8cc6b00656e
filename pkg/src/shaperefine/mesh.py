"""Triangle meshes: representation, Wavefront OBJ I/O and basic geometry."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)


class MeshFormatError(ValueError):
    """Raised when an OBJ file holds geometry that cannot be parsed."""


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Immutable triangle mesh.

    ``vertices`` is an ``(N, 3)`` float64 array and ``faces`` an ``(F, 3)``
    int64 array of vertex indices. The undirected edge set is derived from
    the faces on first access.
    """

    vertices: np.ndarray
    faces: np.ndarray
    name: str = field(default="mesh", compare=False)

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range [0, %d)" % len(v))
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as an ``(E, 2)`` array with ``i < j``."""
        if not self.n_faces:
            return np.zeros((0, 2), dtype=np.int64)
        e = self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
        e = np.sort(e, axis=1)
        out = np.unique(e, axis=0)
        out.setflags(write=False)
        return out

    @cached_property
    def degree(self) -> np.ndarray:
        deg = np.bincount(self.edges.ravel(), minlength=self.n_vertices)
        deg.setflags(write=False)
        return deg

    @cached_property
    def face_adjacency(self) -> np.ndarray:
        """Pairs of face indices sharing an edge, ``(P, 2)``.

        Non-manifold edges contribute every pair of their incident faces.
        """
        if not self.n_faces:
            return np.zeros((0, 2), dtype=np.int64)
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        face_of = np.repeat(np.arange(self.n_faces), 3)
        _, inv = np.unique(e, axis=0, return_inverse=True)
        inv = inv.ravel()
        order = np.argsort(inv, kind="stable")
        inv_s, face_s = inv[order], face_of[order]
        starts = np.flatnonzero(np.r_[True, inv_s[1:] != inv_s[:-1]])
        counts = np.diff(np.r_[starts, len(inv_s)])
        pairs = []
        for s, c in zip(starts[counts >= 2], counts[counts >= 2]):
            group = face_s[s:s + c]
            for a in range(c):
                for b in range(a + 1, c):
                    pairs.append((group[a], group[b]))
        out = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        out.setflags(write=False)
        return out

    @cached_property
    def is_closed(self) -> bool:
        """True when every edge is shared by exactly two faces."""
        if not self.n_faces:
            return False
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.faces, name=self.name)

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return (
            self.vertices.shape == other.vertices.shape
            and self.faces.shape == other.faces.shape
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.faces, other.faces)
        )

    __hash__ = None

    def __repr__(self):
        return "TriangleMesh(name=%r, n_vertices=%d, n_faces=%d)" % (
            self.name, self.n_vertices, self.n_faces)


def _parse_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/")[0]
    try:
        idx = int(head)
    except ValueError:
        raise MeshFormatError("line %d: bad face index %r" % (lineno, token)) from None
    if idx > 0:
        return idx - 1
    if idx < 0:
        return n_vertices + idx
    raise MeshFormatError("line %d: face index 0 is invalid in OBJ" % lineno)


def load_mesh(path) -> TriangleMesh:
    """Read a Wavefront OBJ file.

    Polygons are fan-triangulated, normals/UVs are ignored and degenerate
    triangles (repeated indices) are dropped with a warning.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    verts, faces = [], []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError("line %d: vertex needs 3 coordinates" % lineno)
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise MeshFormatError("line %d: bad vertex %r" % (lineno, line.strip())) from None
            elif parts[0] == "f":
                idx = [_parse_index(t, len(verts), lineno) for t in parts[1:]]
                if len(idx) < 3:
                    raise MeshFormatError("line %d: face needs at least 3 indices" % lineno)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise MeshFormatError("%s: face index out of range" % path)
    if not np.all(np.isfinite(v)):
        raise MeshFormatError("%s: non-finite vertex coordinates" % path)
    degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if degenerate.any():
        logger.warning("%s: dropped %d degenerate faces", path, int(degenerate.sum()))
        f = f[~degenerate]
    mesh = TriangleMesh(v, f, name=os.path.splitext(os.path.basename(path))[0])
    if len(f):
        e = np.sort(f[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        if np.any(counts > 2):
            logger.warning("%s: %d non-manifold edges", path, int(np.sum(counts > 2)))
    return mesh


def save_mesh(mesh: TriangleMesh, path) -> None:
    # %.17g round-trips float64 exactly
    lines = ["v %.17g %.17g %.17g\n" % tuple(v) for v in mesh.vertices]
    lines += ["f %d %d %d\n" % tuple(f + 1) for f in mesh.faces]
    with open(os.fspath(path), "w") as fh:
        fh.writelines(lines)


def displace(mesh: TriangleMesh, dis) -> TriangleMesh:
    """Return a copy of ``mesh`` with per-vertex offsets added."""
    dis = np.asarray(dis, dtype=np.float64)
    if dis.shape != mesh.vertices.shape:
        raise ValueError("displacement shape %s does not match vertices %s"
                         % (dis.shape, mesh.vertices.shape))
    return mesh.with_vertices(mesh.vertices + dis)


def face_normals(mesh: TriangleMesh, return_degenerate: bool = False):
    """Unit face normals with right-hand winding.

    Zero-area faces get a zero vector; pass ``return_degenerate=True`` to
    also receive the boolean mask of those faces.
    """
    tri = mesh.vertices[mesh.faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norm = np.linalg.norm(n, axis=1)
    degenerate = norm <= 1e-300
    n[~degenerate] /= norm[~degenerate, None]
    n[degenerate] = 0.0
    if return_degenerate:
        return n, degenerate
    return n


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def uniform_laplacian(mesh: TriangleMesh, positions=None) -> np.ndarray:
    """Mean of neighbour positions minus own position, per vertex.

    Isolated vertices get a zero vector (a warning is logged).
    """
    p = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    if p.shape != (mesh.n_vertices, 3):
        raise ValueError("positions must have shape (%d, 3)" % mesh.n_vertices)
    e = mesh.edges
    acc = np.zeros_like(p)
    np.add.at(acc, e[:, 0], p[e[:, 1]])
    np.add.at(acc, e[:, 1], p[e[:, 0]])
    deg = mesh.degree
    isolated = deg == 0
    if isolated.any():
        logger.warning("uniform_laplacian: %d isolated vertices", int(isolated.sum()))
    out = np.zeros_like(p)
    ok = ~isolated
    out[ok] = acc[ok] / deg[ok, None] - p[ok]
    return out


def normalize_unit_cube(mesh: TriangleMesh):
    """Recenter to the bounding-box center and scale the max extent to 1.

    Returns the normalized mesh and ``(center, scale)`` such that
    ``original = normalized / scale + center``.
    """
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    extent = float(np.max(hi - lo))
    scale = 1.0 / extent if extent > 0 else 1.0
    return mesh.with_vertices((mesh.vertices - center) * scale), (center, scale)


def denormalize(mesh: TriangleMesh, center, scale) -> TriangleMesh:
    return mesh.with_vertices(mesh.vertices / scale + np.asarray(center))
