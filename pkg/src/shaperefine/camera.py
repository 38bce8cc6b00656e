"""Perspective cameras, projection and symmetry-plane reflection."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch

NEAR_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Look-at perspective camera orbiting ``look_at``.

    Angles are in degrees. The eye sits at
    ``look_at + distance * (cos(e) sin(a), sin(e), cos(e) cos(a))`` so that
    reflecting about the ``z = 0`` plane maps azimuth ``a`` to ``180 - a``.
    ``image_size`` is ``(W, H)``. An explicit ``eye`` (as produced by
    :func:`reflect_camera` or :func:`pose_from_extrinsic`) takes precedence
    over the angles, which are then informational.
    """

    azimuth: float = 0.0
    elevation: float = 0.0
    distance: float = 2.5
    fov_y: float = 30.0
    image_size: tuple = (224, 224)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    eye: tuple | None = field(default=None)

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("distance must be positive")
        if not 0 < self.fov_y < 180:
            raise ValueError("fov_y must lie in (0, 180)")
        w, h = (int(s) for s in self.image_size)
        if w < 8 or h < 8:
            raise ValueError("image_size must be at least 8x8")
        object.__setattr__(self, "image_size", (w, h))
        object.__setattr__(self, "look_at", tuple(float(x) for x in self.look_at))
        object.__setattr__(self, "up", tuple(float(x) for x in self.up))
        if self.eye is None:
            a, e = math.radians(self.azimuth), math.radians(self.elevation)
            d = (math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a))
            eye = tuple(self.look_at[i] + self.distance * d[i] for i in range(3))
        else:
            eye = tuple(float(x) for x in self.eye)
        object.__setattr__(self, "eye", eye)

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def with_image_size(self, image_size) -> "CameraPose":
        return replace(self, image_size=tuple(image_size))

    def key(self):
        return (self.eye, self.look_at, self.up, float(self.fov_y), self.image_size)

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def frame(self):
        """Return ``(right, up, forward)`` unit vectors in world space."""
        eye, look = np.array(self.eye), np.array(self.look_at)
        f = look - eye
        f /= np.linalg.norm(f)
        r = np.cross(f, np.array(self.up))
        nr = np.linalg.norm(r)
        if nr < 1e-12:
            # looking straight along the up hint
            r = np.cross(f, np.array([0.0, 0.0, 1.0]))
            nr = np.linalg.norm(r)
        r /= nr
        u = np.cross(r, f)
        return r, u, f

    @property
    def focal_px(self) -> float:
        return (self.height / 2.0) / math.tan(math.radians(self.fov_y) / 2.0)

    @property
    def near(self) -> float:
        return NEAR_FRACTION * self.distance

    def to_dict(self) -> dict:
        return {
            "azimuth": self.azimuth, "elevation": self.elevation,
            "distance": self.distance, "fov_y": self.fov_y,
            "image_size": list(self.image_size), "look_at": list(self.look_at),
            "up": list(self.up), "eye": list(self.eye),
        }


@dataclass(frozen=True)
class ReflectionPlane:
    """Plane ``{x : n . x = offset}`` with unit normal ``n``."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be a unit 3-vector, got %r" % (self.normal,))
        object.__setattr__(self, "normal", tuple(float(x) for x in n))
        object.__setattr__(self, "offset", float(self.offset))


def reflect_matrix(plane: ReflectionPlane) -> np.ndarray:
    """``I - 2 n n^T`` for the plane's unit normal."""
    n = np.asarray(plane.normal, dtype=np.float64)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise ValueError("plane normal must have unit length")
    return np.eye(3) - 2.0 * np.outer(n, n)


def reflect_points(points, plane: ReflectionPlane):
    """Mirror points (numpy or torch, ``(..., 3)``) about ``plane``."""
    T = reflect_matrix(plane)
    shift = 2.0 * plane.offset * np.asarray(plane.normal)
    if isinstance(points, torch.Tensor):
        Tt = torch.as_tensor(T, dtype=points.dtype)
        out = points @ Tt.T
        if plane.offset:
            out = out + torch.as_tensor(shift, dtype=points.dtype)
        return out
    out = np.asarray(points, dtype=np.float64) @ T.T
    if plane.offset:
        out = out + shift
    return out


def _angles_from_direction(d):
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    elevation = math.degrees(math.asin(max(-1.0, min(1.0, d[1]))))
    azimuth = math.degrees(math.atan2(d[0], d[2])) % 360.0
    return azimuth, elevation


def reflect_camera(pose: CameraPose, plane: ReflectionPlane) -> CameraPose:
    """Camera whose eye and target are mirrored about ``plane``.

    The up hint is kept, so rendering a mirror-symmetric object from the
    reflected camera gives the horizontal flip of the original render.
    """
    eye = reflect_points(np.array(pose.eye), plane)
    look = reflect_points(np.array(pose.look_at), plane)
    azimuth, elevation = _angles_from_direction(eye - look)
    return replace(pose, azimuth=azimuth, elevation=elevation,
                   eye=tuple(float(x) for x in eye),
                   look_at=tuple(float(x) for x in look))


def view_matrix(pose: CameraPose) -> np.ndarray:
    """4x4 world-to-camera matrix (OpenGL convention: camera looks down -z)."""
    r, u, f = pose.frame()
    eye = np.array(pose.eye)
    M = np.eye(4)
    M[0, :3], M[1, :3], M[2, :3] = r, u, -f
    M[:3, 3] = -M[:3, :3] @ eye
    return M


def projection_matrix(pose: CameraPose, far_factor: float = 100.0) -> np.ndarray:
    """OpenGL-style perspective matrix matching :func:`project_points`."""
    f = 1.0 / math.tan(math.radians(pose.fov_y) / 2.0)
    aspect = pose.width / pose.height
    near, far = pose.near, pose.distance * far_factor
    P = np.zeros((4, 4))
    P[0, 0] = f / aspect
    P[1, 1] = f
    P[2, 2] = (far + near) / (near - far)
    P[2, 3] = 2 * far * near / (near - far)
    P[3, 2] = -1.0
    return P


def project_points(points, pose: CameraPose):
    """Project world points to ``(x_img, y_img, depth)``.

    Works on numpy arrays or torch tensors (differentiable). Image ``y``
    points down; pixel ``k`` has its center at ``k + 0.5``. Depth is the
    distance along the optical axis.
    """
    r, u, f = pose.frame()
    R = np.stack([r, u, f])
    eye = np.array(pose.eye)
    c = pose.focal_px
    cx, cy = pose.width / 2.0, pose.height / 2.0
    if isinstance(points, torch.Tensor):
        Rt = torch.as_tensor(R, dtype=points.dtype)
        cam = (points - torch.as_tensor(eye, dtype=points.dtype)) @ Rt.T
        depth = cam[:, 2]
        safe = torch.where(depth.abs() > 1e-12, depth, torch.full_like(depth, 1e-12))
        x = cx + c * cam[:, 0] / safe
        y = cy - c * cam[:, 1] / safe
        return torch.stack([x, y, depth], dim=1)
    points = np.asarray(points, dtype=np.float64)
    cam = (points - eye) @ R.T
    depth = cam[:, 2]
    safe = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
    return np.stack([cx + c * cam[:, 0] / safe, cy - c * cam[:, 1] / safe, depth], axis=1)


def project_vertices(mesh, pose: CameraPose):
    """Project mesh vertices; returns ``(coords (N, 3), valid (N,))``.

    ``valid`` is False for vertices closer than the near plane
    (``0.01 * distance``) or behind the camera.
    """
    xyz = project_points(mesh.vertices, pose)
    valid = xyz[:, 2] > pose.near
    return xyz, valid


def horizontal_flip(image):
    """Mirror an image left-right along its last axis."""
    if isinstance(image, torch.Tensor):
        return image.flip(-1)
    return np.ascontiguousarray(np.asarray(image)[..., ::-1])


def pose_from_extrinsic(matrix, fov_y: float = 30.0, image_size=(224, 224)) -> CameraPose:
    """Build a pose from a 4x4 world-to-camera matrix (camera looks down -z)."""
    M = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
    R, t = M[:3, :3], M[:3, 3]
    eye = -R.T @ t
    forward = -R[2] / np.linalg.norm(R[2])
    up = R[1] / np.linalg.norm(R[1])
    depth_to_origin = float(np.dot(-eye, forward))
    distance = depth_to_origin if depth_to_origin > 1e-6 else float(np.linalg.norm(eye)) or 1.0
    look = eye + distance * forward
    azimuth, elevation = _angles_from_direction(eye - look)
    return CameraPose(azimuth=azimuth, elevation=elevation, distance=distance, fov_y=fov_y,
                      image_size=tuple(image_size), look_at=tuple(look), up=tuple(up),
                      eye=tuple(eye))


def camera_from_dict(data: dict, image_size=None) -> CameraPose:
    size = data.get("image_size") or image_size or (224, 224)
    fov = float(data.get("fov_y", 30.0))
    if "extrinsic" in data:
        ext = data["extrinsic"]
        if len(ext) != 16:
            raise ValueError("extrinsic must hold 16 floats (row-major 4x4)")
        return pose_from_extrinsic(ext, fov_y=fov, image_size=size)
    missing = [k for k in ("azimuth", "elevation", "distance") if k not in data]
    if missing:
        raise ValueError("camera description lacks %s" % ", ".join(missing))
    return CameraPose(
        azimuth=float(data["azimuth"]), elevation=float(data["elevation"]),
        distance=float(data["distance"]), fov_y=fov, image_size=tuple(size),
        look_at=tuple(data.get("look_at", (0.0, 0.0, 0.0))),
        up=tuple(data.get("up", (0.0, 1.0, 0.0))),
        eye=tuple(float(x) for x in data["eye"]) if data.get("eye") is not None else None,
    )


def load_camera(path, image_size=None) -> CameraPose:
    path = os.fspath(path)
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError("%s: invalid camera JSON (%s)" % (path, exc)) from None
    if not isinstance(data, dict):
        raise ValueError("%s: camera JSON must be an object" % path)
    return camera_from_dict(data, image_size=image_size)


def save_camera(pose: CameraPose, path) -> None:
    data = {
        "azimuth": pose.azimuth, "elevation": pose.elevation, "distance": pose.distance,
        "fov_y": pose.fov_y, "image_size": list(pose.image_size),
        "look_at": list(pose.look_at), "up": list(pose.up), "eye": list(pose.eye),
    }
    with open(os.fspath(path), "w") as fh:
        json.dump(data, fh, indent=2)
