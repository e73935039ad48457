"""Reference-view selection and epipolar sample grids."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import InsufficientViews, ShapeMismatch
from .geometry import CameraModel, Ray, SceneFrame, project_points, ray_coords_masked, sphere_intersections

DEPTH_SPACINGS = ("uniform_delta", "uniform_inverse_depth")


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 4
    N: Optional[int] = None  # candidate pool; defaults to 2K
    P: int = 32
    depth_spacing: Optional[str] = None  # None picks per parametrization
    training_mode: bool = False

    def __post_init__(self):
        if self.K < 1 or self.P < 1:
            raise ValueError("K and P must be positive")
        if self.N is not None and self.N < self.K:
            raise ValueError("candidate pool N must be >= K")
        if self.depth_spacing is not None and self.depth_spacing not in DEPTH_SPACINGS:
            raise ValueError(f"unknown depth spacing {self.depth_spacing!r}")

    @property
    def pool(self) -> int:
        return 2 * self.K if self.N is None else self.N


@dataclass(frozen=True, eq=False)
class EpipolarSampleGrid:
    """Epipolar samples for B target rays, K reference views and P depths.

    Geometry fields are float64 numpy arrays. ``colors`` and ``features`` are
    torch tensors filled in by :func:`gather_colors_and_features`.
    """

    view_ids: np.ndarray  # (K,)
    points3d: np.ndarray  # (B, K, P, 3), identical over K
    deltas: np.ndarray  # (B, P)
    pixels: np.ndarray  # (B, K, P, 2); NaN where the projection is undefined
    ray_coords: np.ndarray  # (B, K, P, C)
    valid: np.ndarray  # (B, K, P) bool
    colors: Optional[torch.Tensor] = None  # (B, K, P, 3)
    features: Optional[torch.Tensor] = None  # (B, K, P, F)

    @property
    def batch(self) -> int:
        return self.deltas.shape[0]

    @property
    def K(self) -> int:
        return len(self.view_ids)

    @property
    def P(self) -> int:
        return self.deltas.shape[1]

    @property
    def populated(self) -> bool:
        return self.colors is not None and self.features is not None

    def permute_views(self, order) -> "EpipolarSampleGrid":
        order = np.asarray(order)
        t = torch.as_tensor(order)
        return replace(
            self,
            view_ids=self.view_ids[order],
            points3d=self.points3d[:, order],
            pixels=self.pixels[:, order],
            ray_coords=self.ray_coords[:, order],
            valid=self.valid[:, order],
            colors=None if self.colors is None else self.colors[:, t],
            features=None if self.features is None else self.features[:, t],
        )

    def permute_points(self, order) -> "EpipolarSampleGrid":
        order = np.asarray(order)
        t = torch.as_tensor(order)
        return replace(
            self,
            points3d=self.points3d[:, :, order],
            deltas=self.deltas[:, order],
            pixels=self.pixels[:, :, order],
            ray_coords=self.ray_coords[:, :, order],
            valid=self.valid[:, :, order],
            colors=None if self.colors is None else self.colors[:, :, t],
            features=None if self.features is None else self.features[:, :, t],
        )


def select_reference_views(
    target: CameraModel,
    cameras: Sequence[CameraModel],
    config: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
) -> list[int]:
    """K reference view ids among ``cameras``, never including the target's own id."""
    candidates = [c for c in cameras if c.view_id != target.view_id]
    if len(candidates) < config.K:
        raise InsufficientViews(f"need {config.K} reference views, only {len(candidates)} available")
    center = target.center
    dist = np.array([np.linalg.norm(c.center - center) for c in candidates])
    ids = np.array([c.view_id for c in candidates])
    order = np.lexsort((ids, dist))  # distance first, ties by ascending id
    if not config.training_mode:
        return [int(i) for i in ids[order[: config.K]]]
    pool = ids[order[: min(config.pool, len(candidates))]]
    rng = np.random.default_rng() if rng is None else rng
    return [int(i) for i in rng.choice(pool, size=config.K, replace=False)]


def sample_deltas(rays: Ray, frame: SceneFrame, P: int, spacing: Optional[str] = None) -> np.ndarray:
    """Putative depths along each ray, shape (B, P), strictly increasing."""
    batch = rays.shape[0]
    near = np.full(batch, frame.near)
    far = np.full(batch, frame.far)
    if spacing is None:
        spacing = "uniform_delta" if frame.parametrization == "two_sphere" else "uniform_inverse_depth"
    if frame.parametrization == "two_sphere" and spacing == "uniform_delta":
        d_in, d_out, disc = sphere_intersections(rays, frame.sphere_center, frame.sphere_radius)
        hit = (disc > 1e-12) & (d_out > 0)
        near = np.where(hit, np.maximum(d_in, 1e-6), near)
        far = np.where(hit, d_out, far)
    u = np.linspace(0.0, 1.0, P) if P > 1 else np.zeros(1)
    if spacing == "uniform_delta":
        return near[:, None] + (far - near)[:, None] * u
    inv = 1.0 / near[:, None] + (1.0 / far - 1.0 / near)[:, None] * u
    return 1.0 / inv


def sample_epipolar_points(
    rays: Ray,
    frame: SceneFrame,
    references: Sequence[CameraModel],
    config: SamplerConfig,
    deltas: Optional[np.ndarray] = None,
) -> EpipolarSampleGrid:
    """Project P points of every ray into each reference view (geometry only)."""
    if rays.origin.ndim == 1:
        rays = Ray(rays.origin[None], rays.direction[None], rays.source_view)
    if deltas is None:
        deltas = sample_deltas(rays, frame, config.P, config.depth_spacing)
    points = rays.origin[:, None, :] + deltas[..., None] * rays.direction[:, None, :]  # (B, P, 3)
    pix, coords, valid = [], [], []
    for cam in references:
        p, depth = project_points(cam, points)
        w, h = cam.image_size
        inside = (
            (depth > 1e-12)
            & np.all(np.isfinite(p), axis=-1)
            & (p[..., 0] >= 0)
            & (p[..., 0] <= w - 1)
            & (p[..., 1] >= 0)
            & (p[..., 1] <= h - 1)
        )
        ref_rays = Ray(np.broadcast_to(cam.center, points.shape), points - cam.center)
        vals, ok = ray_coords_masked(ref_rays, frame)
        pix.append(p)
        coords.append(vals)
        valid.append(inside & ok)
    K = len(references)
    return EpipolarSampleGrid(
        view_ids=np.array([c.view_id for c in references], dtype=np.int64),
        points3d=np.broadcast_to(points[:, None], (points.shape[0], K) + points.shape[1:]),
        deltas=deltas,
        pixels=np.stack(pix, axis=1),
        ray_coords=np.stack(coords, axis=1),
        valid=np.stack(valid, axis=1),
    )


def bilinear_sample(image: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    """Sample an (H, W, C) image at continuous (x, y) pixels, shape (..., 2) -> (..., C).

    Pixels are clamped to the image; callers mask out-of-bounds queries.
    """
    H, W = image.shape[:2]
    x = pixels[..., 0].clamp(0, W - 1)
    y = pixels[..., 1].clamp(0, H - 1)
    x0 = x.floor().clamp(max=W - 1)
    y0 = y.floor().clamp(max=H - 1)
    wx = (x - x0).to(image.dtype)[..., None]
    wy = (y - y0).to(image.dtype)[..., None]
    x0i, y0i = x0.long(), y0.long()
    x1i = (x0i + 1).clamp(max=W - 1)
    y1i = (y0i + 1).clamp(max=H - 1)
    top = image[y0i, x0i] * (1 - wx) + image[y0i, x1i] * wx
    bottom = image[y1i, x0i] * (1 - wx) + image[y1i, x1i] * wx
    return top * (1 - wy) + bottom * wy


def gather_colors_and_features(
    grid: EpipolarSampleGrid,
    images: Sequence,
    feature_maps: Sequence[torch.Tensor],
) -> EpipolarSampleGrid:
    """Bilinear colors and visual features at every epipolar pixel; zeros where invalid."""
    if len(images) != grid.K or len(feature_maps) != grid.K:
        raise ShapeMismatch(f"expected {grid.K} images and feature maps, got {len(images)} and {len(feature_maps)}")
    colors, feats = [], []
    for j in range(grid.K):
        fmap = feature_maps[j]
        img = torch.as_tensor(images[j], dtype=fmap.dtype, device=fmap.device)
        if img.shape[:2] != fmap.shape[:2]:
            raise ShapeMismatch(f"view {grid.view_ids[j]}: image {tuple(img.shape)} vs features {tuple(fmap.shape)}")
        valid = torch.as_tensor(grid.valid[:, j], device=fmap.device)[..., None]
        pix = torch.as_tensor(np.nan_to_num(grid.pixels[:, j]), dtype=torch.float64, device=fmap.device)
        colors.append(torch.where(valid, bilinear_sample(img, pix), 0.0))
        feats.append(torch.where(valid, bilinear_sample(fmap, pix), 0.0))
    return replace(grid, colors=torch.stack(colors, dim=1), features=torch.stack(feats, dim=1))
