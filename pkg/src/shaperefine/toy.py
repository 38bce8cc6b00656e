"""Procedural meshes and small refinement scenarios used by tests and demos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraPose
from .mesh import TriangleMesh
from .rasterizer import hard_silhouette


def octahedron(radius: float = 1.0) -> TriangleMesh:
    v = radius * np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    f = [[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]]
    return TriangleMesh(v, f, name="octahedron")


def icosahedron() -> TriangleMesh:
    phi = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    return TriangleMesh(v, f, name="icosahedron")


def subdivide(mesh: TriangleMesh, project_to_sphere: bool = False) -> TriangleMesh:
    """Loop-free midpoint subdivision: every triangle becomes four."""
    v, f = mesh.vertices, mesh.faces
    edges = mesh.edges
    n = len(v)
    mid = (v[edges[:, 0]] + v[edges[:, 1]]) / 2.0
    if project_to_sphere:
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    lookup = {(int(a), int(b)): n + k for k, (a, b) in enumerate(edges)}

    def m(a, b):
        return lookup[(a, b) if a < b else (b, a)]

    faces = []
    for a, b, c in f.tolist():
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return TriangleMesh(np.vstack([v, mid]), faces, name=mesh.name)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Unit icosphere; 3 subdivisions give 642 vertices."""
    mesh = icosahedron()
    for _ in range(subdivisions):
        mesh = subdivide(mesh, project_to_sphere=True)
    return TriangleMesh(mesh.vertices * radius, mesh.faces, name="icosphere%d" % subdivisions)


def box(half_extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), subdivisions: int = 0) -> TriangleMesh:
    """Closed axis-aligned box with outward-facing triangles."""
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    f = [
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ]
    mesh = TriangleMesh(v, f, name="box")
    for _ in range(subdivisions):
        mesh = subdivide(mesh)
    verts = mesh.vertices * np.asarray(half_extents, float) + np.asarray(center, float)
    return TriangleMesh(verts, mesh.faces, name="box")


def flat_grid(n: int = 4, size: float = 1.0) -> TriangleMesh:
    """Planar ``n x n`` quad grid in z = 0, split into triangles."""
    xs = np.linspace(-size, size, n + 1)
    v = np.array([[x, y, 0.0] for y in xs for x in xs])
    f = []
    for j in range(n):
        for i in range(n):
            a = j * (n + 1) + i
            b, c, d = a + 1, a + n + 1, a + n + 2
            f += [[a, b, d], [a, d, c]]
    return TriangleMesh(v, f, name="grid")


def lobed_shape(lobe_pos: float = 0.9, lobe_neg: float = 0.9, subdivisions: int = 3,
                body=(0.9, 0.6, 0.45), lobe_width: float = 0.4) -> TriangleMesh:
    """Icosphere-based body with lobes pushed out along +z and -z.

    Equal lobe lengths give a shape mirror-symmetric about ``z = 0``;
    ``lobe_neg = 0`` truncates the lobe on the negative side.
    """
    s = icosphere(subdivisions)
    x, y, z = s.vertices.T
    r_perp = np.sqrt(x ** 2 + y ** 2)
    bump = np.clip(1.0 - r_perp / lobe_width, 0.0, None) ** 2
    zz = np.where(z >= 0, z * (body[2] + lobe_pos * bump), z * (body[2] + lobe_neg * bump))
    v = np.stack([x * body[0], y * body[1], zz], axis=1)
    return TriangleMesh(v, s.faces, name="lobed")


BOX_HALF_EXTENTS = (1.3, 0.45, 0.7)
LOBE_BODY = (1.2, 0.7, 0.5)
LOBE_LENGTH = 1.0
LOBE_WIDTH = 0.6


@dataclass
class ToyInstance:
    name: str
    coarse: TriangleMesh
    target: TriangleMesh
    pose: CameraPose
    silhouette: np.ndarray


def make_instance(name, coarse, target, azimuth=30.0, elevation=20.0, distance=7.0,
                  image_size=(128, 128), fov_y=30.0) -> ToyInstance:
    pose = CameraPose(azimuth=azimuth, elevation=elevation, distance=distance,
                      fov_y=fov_y, image_size=image_size)
    sil = hard_silhouette(target, pose).astype(np.float64)
    return ToyInstance(name, coarse, target, pose, sil)


def sphere_to_box(image_size=(128, 128)) -> ToyInstance:
    """Unit icosphere refined toward an axis-aligned box silhouette."""
    return make_instance("sphere_to_box", icosphere(3), box(BOX_HALF_EXTENTS),
                         image_size=image_size)


def truncated_lobe(image_size=(128, 128)) -> ToyInstance:
    """Symmetric two-lobed mesh whose true shape lacks the ``-z`` lobe.

    Seen from the side (azimuth 90) so both lobes lie across the image.
    """
    coarse = lobed_shape(LOBE_LENGTH, LOBE_LENGTH, body=LOBE_BODY, lobe_width=LOBE_WIDTH)
    target = lobed_shape(LOBE_LENGTH, 0.0, body=LOBE_BODY, lobe_width=LOBE_WIDTH)
    return make_instance("truncated_lobe", coarse, target, azimuth=90.0, distance=5.0,
                         image_size=image_size)


def lobe_regions(subdivisions: int = 3, lobe_width: float = None):
    """Vertex masks ``(asymmetric, symmetric)`` of :func:`lobed_shape` meshes.

    The asymmetric region is both lobe caps: after truncation neither cap
    has a mirror counterpart on the true shape.
    """
    lobe_width = LOBE_WIDTH if lobe_width is None else lobe_width
    v = icosphere(subdivisions).vertices
    cap = np.hypot(v[:, 0], v[:, 1]) < lobe_width
    return cap, ~cap


def toy_suite(image_size=(128, 128)):
    return [sphere_to_box(image_size), truncated_lobe(image_size)]
