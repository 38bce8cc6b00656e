"""Independent reference implementations used as test oracles.

Each oracle re-derives a quantity from its definition with plain loops or
dense numpy, sharing no code with the package beyond data containers.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------- camera


def look_at_matrix(eye, target, up):
    """gluLookAt-style 4x4 world-to-camera matrix."""
    eye, target, up = (np.asarray(x, dtype=np.float64) for x in (eye, target, up))
    f = target - eye
    f = f / math.sqrt(f @ f)
    s = np.array([f[1] * up[2] - f[2] * up[1], f[2] * up[0] - f[0] * up[2], f[0] * up[1] - f[1] * up[0]])
    s = s / math.sqrt(s @ s)
    u = np.array([s[1] * f[2] - s[2] * f[1], s[2] * f[0] - s[0] * f[2], s[0] * f[1] - s[1] * f[0]])
    M = np.array([
        [s[0], s[1], s[2], 0.0],
        [u[0], u[1], u[2], 0.0],
        [-f[0], -f[1], -f[2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    T = np.eye(4)
    T[:3, 3] = -eye
    return M @ T


def perspective_matrix(fov_y_deg, aspect, near, far):
    f = 1.0 / math.tan(math.radians(fov_y_deg) / 2.0)
    return np.array([
        [f / aspect, 0, 0, 0],
        [0, f, 0, 0],
        [0, 0, (far + near) / (near - far), 2 * far * near / (near - far)],
        [0, 0, -1, 0],
    ], dtype=np.float64)


def project_step_by_step(point, eye, target, up, fov_y, width, height, near=0.01, far=100.0):
    """World -> camera -> clip -> NDC -> pixel, one matrix at a time."""
    p = np.append(np.asarray(point, dtype=np.float64), 1.0)
    cam = look_at_matrix(eye, target, up) @ p
    clip = perspective_matrix(fov_y, width / height, near, far) @ cam
    ndc = clip[:3] / clip[3]
    x = (ndc[0] + 1.0) * 0.5 * width
    y = (1.0 - ndc[1]) * 0.5 * height
    return x, y, -cam[2]


def eye_position(azimuth, elevation, distance, look_at=(0, 0, 0)):
    a, e = math.radians(azimuth), math.radians(elevation)
    return (look_at[0] + distance * math.cos(e) * math.sin(a),
            look_at[1] + distance * math.sin(e),
            look_at[2] + distance * math.cos(e) * math.cos(a))


# ---------------------------------------------------------------- raster


def point_segment_dist2(p, a, b):
    ab = b - a
    denom = ab @ ab
    t = 0.0 if denom == 0 else min(1.0, max(0.0, ((p - a) @ ab) / denom))
    q = a + t * ab
    return float((p - q) @ (p - q))


def barycentric(p, a, b, c):
    """Solve ``p = a + l1 (b - a) + l2 (c - a)``; returns ``(l0, l1, l2)``."""
    M = np.array([[b[0] - a[0], c[0] - a[0]], [b[1] - a[1], c[1] - a[1]]])
    l1, l2 = np.linalg.solve(M, np.asarray(p) - np.asarray(a))
    return 1.0 - l1 - l2, l1, l2


def soft_silhouette_oracle(pts2d, faces, width, height, sigma_px):
    """``1 - prod_f (1 - sigmoid(s_f d_f^2 / sigma))`` evaluated pixel by pixel."""
    out = np.zeros((height, width))
    pts2d = np.asarray(pts2d, dtype=np.float64)
    for j in range(height):
        for k in range(width):
            p = np.array([k + 0.5, j + 0.5])
            keep = 1.0
            for f in faces:
                a, b, c = pts2d[f[0]], pts2d[f[1]], pts2d[f[2]]
                d2 = min(point_segment_dist2(p, a, b), point_segment_dist2(p, b, c),
                         point_segment_dist2(p, c, a))
                l0, l1, l2 = barycentric(p, a, b, c)
                sign = 1.0 if (l0 >= 0 and l1 >= 0 and l2 >= 0) else -1.0
                z = sign * d2 / sigma_px
                D = 1.0 / (1.0 + math.exp(-z)) if z > -700 else 0.0
                keep *= 1.0 - D
            out[j, k] = 1.0 - keep
    return out


def hard_silhouette_oracle(pts2d, faces, width, height):
    out = np.zeros((height, width), dtype=bool)
    for j in range(height):
        for k in range(width):
            p = np.array([k + 0.5, j + 0.5])
            for f in faces:
                a, b, c = (pts2d[i] for i in f)
                try:
                    l = barycentric(p, a, b, c)
                except np.linalg.LinAlgError:
                    continue
                if min(l) >= 0:
                    out[j, k] = True
                    break
    return out


# ---------------------------------------------------------------- geometry


def laplacian_oracle(vertices, faces):
    n = len(vertices)
    nbrs = [set() for _ in range(n)]
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            nbrs[a].add(b)
            nbrs[b].add(a)
    out = np.zeros((n, 3))
    for i in range(n):
        if nbrs[i]:
            out[i] = np.mean([vertices[j] for j in nbrs[i]], axis=0) - vertices[i]
    return out


def winding_number(point, vertices, faces):
    """Generalized winding number of a closed triangle mesh at ``point``."""
    total = 0.0
    for f in faces:
        a, b, c = (np.asarray(vertices[i], dtype=np.float64) - point for i in f)
        la, lb, lc = np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(c)
        num = a @ np.cross(b, c)
        den = la * lb * lc + (a @ b) * lc + (b @ c) * la + (c @ a) * lb
        total += 2.0 * math.atan2(num, den)
    return total / (4.0 * math.pi)


def winding_numbers(points, vertices, faces):
    """:func:`winding_number` for many points at once, looping over faces."""
    points = np.asarray(points, dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    total = np.zeros(len(points))
    for f in faces:
        a, b, c = (vertices[i] - points for i in f)
        la, lb, lc = (np.linalg.norm(x, axis=1) for x in (a, b, c))
        num = np.einsum("ij,ij->i", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ij,ij->i", a, b) * lc + np.einsum("ij,ij->i", b, c) * la
               + np.einsum("ij,ij->i", c, a) * lb)
        total += 2.0 * np.arctan2(num, den)
    return total / (4.0 * math.pi)


def occupancy_oracle(vertices, faces, centers):
    cx, cy, cz = centers
    pts = np.stack(np.meshgrid(cx, cy, cz, indexing="ij"), axis=-1).reshape(-1, 3)
    occ = winding_numbers(pts, vertices, faces) > 0.5
    return occ.reshape(len(cx), len(cy), len(cz))


# ---------------------------------------------------------------- metrics


def chamfer_oracle(A, B):
    A, B = np.asarray(A, float), np.asarray(B, float)
    ab = [min(float(np.sum((a - b) ** 2)) for b in B) for a in A]
    ba = [min(float(np.sum((b - a) ** 2)) for a in A) for b in B]
    return sum(ab) / len(ab) + sum(ba) / len(ba)


def fscore_oracle(A, B, tau):
    A, B = np.asarray(A, float), np.asarray(B, float)
    prec = np.mean([min(float(np.sum((a - b) ** 2)) for b in B) <= tau * tau for a in A])
    rec = np.mean([min(float(np.sum((b - a) ** 2)) for a in A) <= tau * tau for b in B])
    if prec + rec == 0:
        return 0.0
    return 100.0 * 2 * prec * rec / (prec + rec)


def emd_permutation_oracle(A, B):
    """Exact EMD by enumerating every bijection (tiny sets only)."""
    A, B = np.asarray(A, float), np.asarray(B, float)
    n = len(A)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(float(np.linalg.norm(A[i] - B[perm[i]])) for i in range(n)))
    return best / n


def mask_iou_oracle(a, b):
    inter = union = 0
    for x, y in zip(np.asarray(a).ravel(), np.asarray(b).ravel()):
        inter += bool(x) and bool(y)
        union += bool(x) or bool(y)
    return inter / union


# ---------------------------------------------------------------- losses


def bce_oracle(a, b, eps=1e-7):
    total = 0.0
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    for x, y in zip(a, b):
        y = min(max(y, eps), 1 - eps)
        total += -(x * math.log(y) + (1 - x) * math.log(1 - y))
    return total / len(a)


def vertex_symmetry_oracle(verts, conf, normal, symb):
    verts = np.asarray(verts, float)
    n = np.asarray(normal, float)
    T = np.eye(3) - 2 * np.outer(n, n)
    total = 0.0
    for v, s in zip(verts, conf):
        tv = T @ v
        d = min(float(np.sum((tv - w) ** 2)) for w in verts)
        total += s * d + symb * math.log(1.0 / s)
    return total / len(verts)


def normal_consistency_oracle(vertices, faces):
    vertices = np.asarray(vertices, float)
    normals = []
    for f in faces:
        a, b, c = vertices[list(f)]
        n = np.cross(b - a, c - a)
        normals.append(n / np.linalg.norm(n))
    edge_faces = {}
    for fi, f in enumerate(faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edge_faces.setdefault((min(a, b), max(a, b)), []).append(fi)
    vals = []
    for fs in edge_faces.values():
        for i, j in itertools.combinations(fs, 2):
            vals.append(1.0 - float(normals[i] @ normals[j]))
    return sum(vals) / len(vals) if vals else 0.0
