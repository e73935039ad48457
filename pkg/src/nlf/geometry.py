"""Pinhole cameras, rays and light-field ray parametrizations.

Everything here runs on float64 numpy arrays. Functions accept batched
inputs: a trailing axis of size 3 (points, directions) or 2 (pixels), with
any number of leading axes.

Pixel convention: the homogeneous pixel ``(x, y, 1)`` is used as is, so the
center of image sample ``image[row, col]`` sits at pixel ``(col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateProjection,
    InvalidCamera,
    NoIntersection,
    ParallelRay,
    TangentRay,
    ZeroDirection,
)

PARAMETRIZATIONS = ("slab", "two_sphere", "plucker")

_DEPTH_EPS = 1e-12
_PARALLEL_EPS = 1e-9
_TANGENT_EPS = 1e-12
_POLE_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray  # world -> camera
    image_size: tuple[int, int]  # (width, height)
    view_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "intrinsics", np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        w, h = self.image_size
        object.__setattr__(self, "image_size", (int(w), int(h)))
        object.__setattr__(self, "view_id", int(self.view_id))

    @classmethod
    def from_focal(cls, focal, image_size, rotation=None, translation=None, view_id=0, principal=None):
        """Camera with square pixels and the principal point at the image center by default."""
        w, h = image_size
        if principal is None:
            principal = ((w - 1) / 2.0, (h - 1) / 2.0)
        fx, fy = (focal, focal) if np.isscalar(focal) else focal
        K = np.array([[fx, 0.0, principal[0]], [0.0, fy, principal[1]], [0.0, 0.0, 1.0]])
        R = np.eye(3) if rotation is None else rotation
        t = np.zeros(3) if translation is None else translation
        return cls(K, R, t, (w, h), view_id)

    @classmethod
    def look_at(cls, center, target, up, focal, image_size, view_id=0):
        """Camera at ``center`` whose +z axis points at ``target`` (y axis down in the image)."""
        center = np.asarray(center, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - center
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls.from_focal(focal, image_size, R, -R @ center, view_id)

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def validate(self, tol: float = 1e-6) -> None:
        R, K = self.rotation, self.intrinsics
        if not np.allclose(R @ R.T, np.eye(3), atol=tol, rtol=0.0):
            raise InvalidCamera(f"view {self.view_id}: rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > tol:
            raise InvalidCamera(f"view {self.view_id}: rotation determinant is not +1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise InvalidCamera(f"view {self.view_id}: focal lengths must be positive")
        if K[0, 1] != 0 or np.any(K[2] != (0.0, 0.0, 1.0)) or K[1, 0] != 0:
            raise InvalidCamera(f"view {self.view_id}: intrinsics must be upper triangular with zero skew")

    def pixel_grid(self) -> np.ndarray:
        """All pixel centers in row-major order, shape (H, W, 2)."""
        xs, ys = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        return np.stack([xs, ys], axis=-1)


@dataclass(frozen=True, eq=False)
class Ray:
    """World line ``origin + delta * direction``; direction is left unnormalized."""

    origin: np.ndarray
    direction: np.ndarray
    source_view: Optional[int] = None

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        o, d = np.broadcast_arrays(o, d)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.origin.shape[:-1]

    def __len__(self):
        return self.shape[0]

    def __getitem__(self, idx) -> "Ray":
        return Ray(self.origin[idx], self.direction[idx], self.source_view)


@dataclass(frozen=True)
class SceneFrame:
    z_st: float
    z_uv: float
    sphere_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sphere_radius: float = 1.0
    near: float = 1.0
    far: float = 2.0
    parametrization: str = "slab"
    scale: float = 1.0  # multiplies ray coordinates before encoding

    def __post_init__(self):
        object.__setattr__(self, "sphere_center", tuple(float(c) for c in self.sphere_center))
        if self.z_st == self.z_uv:
            raise ValueError("slab planes must be distinct")
        if not self.sphere_radius > 0:
            raise ValueError("sphere_radius must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {self.parametrization!r}")

    @property
    def coord_dim(self) -> int:
        return 6 if self.parametrization == "plucker" else 4


@dataclass(frozen=True, eq=False)
class LightFieldCoords:
    """Light-field coordinates of one or many rays.

    ``values`` holds (s,t,u,v), (theta1,phi1,theta2,phi2) or (d, m) along the
    last axis, depending on ``variant``.
    """

    variant: str
    values: np.ndarray

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


def ray_from_pixel(camera: CameraModel, pixel) -> Ray:
    pixel = np.asarray(pixel, dtype=np.float64)
    homog = np.concatenate([pixel, np.ones(pixel.shape[:-1] + (1,))], axis=-1)
    cam_dirs = np.linalg.solve(camera.intrinsics, homog.reshape(-1, 3).T).T
    dirs = cam_dirs @ camera.rotation  # R^T applied to row vectors
    dirs = dirs.reshape(pixel.shape[:-1] + (3,))
    origin = np.broadcast_to(camera.center, dirs.shape)
    return Ray(origin, dirs, camera.view_id)


def point_at(ray: Ray, delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    return ray.origin + delta[..., None] * ray.direction


def project_points(camera: CameraModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection that never raises; pixels are NaN where depth is ~0."""
    points = np.asarray(points, dtype=np.float64)
    cam = points @ camera.rotation.T + camera.translation
    img = cam @ camera.intrinsics.T
    depth = cam[..., 2]
    ok = np.abs(depth) >= _DEPTH_EPS
    safe = np.where(ok, depth, 1.0)
    pixels = img[..., :2] / safe[..., None]
    pixels = np.where(ok[..., None], pixels, np.nan)
    return pixels, depth


def project(camera: CameraModel, point) -> tuple[np.ndarray, np.ndarray]:
    pixels, depth = project_points(camera, point)
    if np.any(np.abs(depth) < _DEPTH_EPS):
        raise DegenerateProjection("point lies on the camera's principal plane")
    return pixels, depth


def _slab_values(origin, direction, z_st, z_uv):
    dz = direction[..., 2]
    d_st = (z_st - origin[..., 2]) / dz
    d_uv = (z_uv - origin[..., 2]) / dz
    st = origin[..., :2] + d_st[..., None] * direction[..., :2]
    uv = origin[..., :2] + d_uv[..., None] * direction[..., :2]
    return np.concatenate([st, uv], axis=-1)


def slab_coords(ray: Ray, frame: SceneFrame) -> LightFieldCoords:
    if np.any(np.abs(ray.direction[..., 2]) <= _PARALLEL_EPS):
        raise ParallelRay("ray is parallel to the slab planes")
    return LightFieldCoords("slab", _slab_values(ray.origin, ray.direction, frame.z_st, frame.z_uv))


def sphere_intersections(ray: Ray, center, radius) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entry/exit deltas and the quadratic discriminant (no validity check)."""
    oc = ray.origin - np.asarray(center, dtype=np.float64)
    d = ray.direction
    a = np.sum(d * d, axis=-1)
    half_b = np.sum(oc * d, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius**2
    disc = half_b**2 - a * c
    root = np.sqrt(np.maximum(disc, 0.0))
    # numerically stable pair of roots
    q = -(half_b + np.copysign(root, half_b))
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = q / a
        r2 = np.where(q != 0, c / q, -half_b / a)
    return np.minimum(r1, r2), np.maximum(r1, r2), disc


def _angles(v):
    r = np.linalg.norm(v, axis=-1)
    theta = np.arccos(np.clip(v[..., 2] / r, -1.0, 1.0))
    phi = np.arctan2(v[..., 1], v[..., 0])
    phi = np.where(np.sin(theta) < _POLE_EPS, 0.0, phi)
    phi = np.where(phi == -np.pi, np.pi, phi)
    return theta, phi


def _sphere_values(ray, center, radius):
    d_in, d_out, disc = sphere_intersections(ray, center, radius)
    center = np.asarray(center, dtype=np.float64)
    t1, p1 = _angles(point_at(ray, d_in) - center)
    t2, p2 = _angles(point_at(ray, d_out) - center)
    return np.stack([t1, p1, t2, p2], axis=-1), disc


def sphere_coords(ray: Ray, frame: SceneFrame) -> LightFieldCoords:
    values, disc = _sphere_values(ray, frame.sphere_center, frame.sphere_radius)
    if np.any(disc < -_TANGENT_EPS):
        raise NoIntersection("ray misses the bounding sphere")
    if np.any(np.abs(disc) <= _TANGENT_EPS):
        raise TangentRay("ray is tangent to the bounding sphere")
    return LightFieldCoords("two_sphere", values)


def plucker_coords(ray: Ray) -> LightFieldCoords:
    norm = np.linalg.norm(ray.direction, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ZeroDirection("ray direction has zero length")
    d = ray.direction / norm
    # moment of the line is the same for every point on it; subtracting the
    # component along d first keeps m exactly orthogonal in floating point
    foot = ray.origin - np.sum(ray.origin * d, axis=-1, keepdims=True) * d
    m = np.cross(foot, d)
    return LightFieldCoords("plucker", np.concatenate([d, m], axis=-1))


def ray_coords(ray: Ray, frame: SceneFrame) -> LightFieldCoords:
    """Coordinates in the frame's active parametrization (errors propagate)."""
    if frame.parametrization == "slab":
        return slab_coords(ray, frame)
    if frame.parametrization == "two_sphere":
        return sphere_coords(ray, frame)
    return plucker_coords(ray)


def ray_coords_masked(ray: Ray, frame: SceneFrame) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`ray_coords` but returns (values, ok) with zeros where undefined."""
    o, d = ray.origin, ray.direction
    if frame.parametrization == "slab":
        ok = np.abs(d[..., 2]) > _PARALLEL_EPS
        safe_d = np.where(ok[..., None], d, np.array([0.0, 0.0, 1.0]))
        vals = _slab_values(o, safe_d, frame.z_st, frame.z_uv)
    elif frame.parametrization == "two_sphere":
        vals, disc = _sphere_values(ray, frame.sphere_center, frame.sphere_radius)
        ok = disc > _TANGENT_EPS
    else:
        norm = np.linalg.norm(d, axis=-1)
        ok = norm > 0
        safe = Ray(o, np.where(ok[..., None], d, np.array([0.0, 0.0, 1.0])))
        vals = plucker_coords(safe).values
    ok = ok & np.all(np.isfinite(vals), axis=-1)
    vals = np.where(ok[..., None], vals, 0.0) * frame.scale
    return vals, ok


def slab_to_ray(coords, frame: SceneFrame) -> Ray:
    """World line through (s, t, z_st) and (u, v, z_uv), oriented from st to uv.

    The origin is placed on the z = 0 plane and the direction has unit z
    component, so ``delta`` is the forward coordinate, as for a camera at
    z = 0 looking down +z.
    """
    coords = np.asarray(coords, dtype=np.float64) / frame.scale
    ones = np.ones(coords.shape[:-1] + (1,))
    dz = frame.z_uv - frame.z_st
    slope = (coords[..., 2:4] - coords[..., :2]) / dz
    direction = np.concatenate([slope, ones], axis=-1) * np.sign(dz)
    origin = np.concatenate([coords[..., :2] - frame.z_st * slope, 0 * ones], axis=-1)
    return Ray(origin, direction)
