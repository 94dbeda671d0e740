"""Pinhole cameras, rigid poses, rays, and cross-view reprojection.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward (points in front of the camera
  have z > 0).
* Pixel coordinates (u, v): u indexes columns, v indexes rows, and integer
  coordinates address pixel centers. Pixel (u, v) samples image[v, u]. A
  pixel is inside an image of width W iff -0.5 <= u < W - 0.5 (same for v).
* Poses are camera-to-world: x_world = R @ x_cam + t.
* Rays carry a unit-norm world direction; the ray parameter t is Euclidean
  distance. The z-depth of the point at parameter t is t * ray_z_scale(u, v),
  see `ray_z_scale`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-9


class InvalidPixelError(ValueError):
    """Pixel coordinates outside the image bounds."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with zero skew."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image dims must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def matrix(self) -> np.ndarray:
        """3x3 calibration matrix K."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, u, v):
        """True where (u, v) lies inside the image under the pixel-center convention."""
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=np.float64)

    def rounded(self) -> tuple[int, int]:
        """(column, row) of the nearest pixel center."""
        return int(round(self.u)), int(round(self.v))

    def distance(self, other: "Pixel") -> float:
        return math.hypot(self.u - other.u, self.v - other.v)


def _check_rotation(r: np.ndarray):
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > _ORTHO_TOL:
        raise ValueError(f"rotation not orthonormal (max |R^T R - I| = {err:.3e})")
    if np.linalg.det(r) < 0:
        raise ValueError("rotation has negative determinant (reflection)")


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        r = r.copy()
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-12:
            raise ValueError("pose matrix bottom row must be [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other: (self.compose(other))(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, dirs: np.ndarray) -> np.ndarray:
        dirs = np.asarray(dirs, dtype=np.float64)
        return dirs @ self.rotation.T

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,) world
    direction: np.ndarray  # (3,) world, unit norm
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3).copy()
        d = np.asarray(self.direction, dtype=np.float64).reshape(3).copy()
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit norm, got |d| = {n!r}")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"need 0 <= t_near < t_far, got [{self.t_near}, {self.t_far}]")
        o.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction if t.ndim else self.origin + t * self.direction


def camera_directions(intr: CameraIntrinsics, u, v) -> np.ndarray:
    """Unit camera-frame directions through pixels (u, v). Broadcasts; returns (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - intr.cx) / intr.fx
    y = (v - intr.cy) / intr.fy
    d = np.stack(np.broadcast_arrays(x, y, np.ones_like(x + y)), axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_z_scale(intr: CameraIntrinsics, u, v):
    """z-component of the unit camera-frame direction through (u, v).

    Converts along-ray distance to camera z-depth: z = t * ray_z_scale(u, v).
    """
    x = (np.asarray(u, dtype=np.float64) - intr.cx) / intr.fx
    y = (np.asarray(v, dtype=np.float64) - intr.cy) / intr.fy
    return 1.0 / np.sqrt(x * x + y * y + 1.0)


def generate_ray(intr: CameraIntrinsics, pose: Pose, px: Pixel,
                 t_near: float = 0.0, t_far: float = math.inf) -> Ray:
    """World-space viewing ray through the center of pixel px."""
    if not bool(intr.contains(px.u, px.v)):
        raise InvalidPixelError(f"pixel ({px.u}, {px.v}) outside {intr.width}x{intr.height} image")
    d_cam = camera_directions(intr, px.u, px.v)
    return Ray(pose.center, pose.rotate(d_cam), t_near, t_far)


def generate_rays(intr: CameraIntrinsics, pose: Pose, u, v):
    """Batched ray construction: world origins (3,) and unit directions (..., 3)."""
    d_world = pose.rotate(camera_directions(intr, u, v))
    return pose.center, d_world


def unproject(intr: CameraIntrinsics, px: Pixel, depth: float) -> np.ndarray:
    """Camera-frame point at z-depth `depth` behind pixel px."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    return np.array([(px.u - intr.cx) / intr.fx * depth,
                     (px.v - intr.cy) / intr.fy * depth,
                     depth])


def project(intr: CameraIntrinsics, point_cam: np.ndarray) -> tuple[Pixel, bool]:
    """Project a camera-frame point. valid iff in front of the camera and in bounds."""
    x, y, z = np.asarray(point_cam, dtype=np.float64).reshape(3)
    if z <= 0:
        return Pixel(math.nan, math.nan), False
    u = intr.fx * x / z + intr.cx
    v = intr.fy * y / z + intr.cy
    return Pixel(u, v), bool(intr.contains(u, v))


def project_points(intr: CameraIntrinsics, points_cam: np.ndarray):
    """Batched `project`. Returns (uv (..., 2), valid (...,)); uv is NaN where z <= 0."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[..., 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, intr.fx * p[..., 0] / z + intr.cx, np.nan)
        v = np.where(front, intr.fy * p[..., 1] / z + intr.cy, np.nan)
    valid = front & intr.contains(np.where(front, u, 0.0), np.where(front, v, 0.0))
    return np.stack([u, v], axis=-1), valid


def reproject(px: Pixel, depth: float, intr: CameraIntrinsics,
              pose_src: Pose, pose_tgt: Pose) -> tuple[Pixel, bool]:
    """Map a source pixel with known z-depth into the target view.

    depth is the z-depth in the source camera frame (see module docstring for
    the along-ray conversion). The invalid flag covers points behind the
    target camera and projections outside the image.
    """
    point_world = pose_src.transform(unproject(intr, px, depth))
    return project(intr, pose_tgt.inverse().transform(point_world))


def reproject_many(uv: np.ndarray, depths: np.ndarray, intr: CameraIntrinsics,
                   pose_src: Pose, pose_tgt: Pose):
    """Batched `reproject` for uv (N, 2), depths (N,). Returns (uv_t (N, 2), valid (N,))."""
    uv = np.asarray(uv, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise ValueError("depths must be positive")
    x = (uv[:, 0] - intr.cx) / intr.fx * depths
    y = (uv[:, 1] - intr.cy) / intr.fy * depths
    pts_src = np.stack([x, y, depths], axis=-1)
    rel = pose_tgt.inverse().compose(pose_src)
    return project_points(intr, rel.transform(pts_src))


def look_at_pose(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at `eye` with +z toward `target`.

    `up` is the world direction that should map near the camera's -y axis
    (y is down in the camera frame). Default suits y-down worlds rendered
    with y increasing downward in image space.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    n = np.linalg.norm(z)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    z = z / n
    x = np.cross(-up, z)  # right-handed with y down: x = down x z, y = z x x
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("up parallel to view direction")
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)
