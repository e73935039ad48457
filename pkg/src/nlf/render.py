"""Image rendering and attention-based interpretability outputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import AllPointsMasked, ConfigError, ParallelRay
from .geometry import CameraModel, Ray, ray_coords_masked, ray_from_pixel, slab_to_ray
from .model import NeuralLightField, RenderTrace
from .sampler import SamplerConfig, gather_colors_and_features, sample_epipolar_points, select_reference_views
from .scene import Scene

OUTPUTS = ("color", "disparity", "depth", "beta", "alpha")
DEBUG_COLOR = np.array([1.0, 0.0, 1.0])

# Rays are always evaluated in chunks of exactly this many (padding the last
# one), so every ray goes through identically shaped kernels and the result
# does not depend on how callers block the image.
_CHUNK = 64


@dataclass(frozen=True)
class RenderRequest:
    camera: CameraModel
    block_size: int = 4096
    outputs: tuple[str, ...] = ("color",)

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        bad = set(self.outputs) - set(OUTPUTS)
        if bad:
            raise ValueError(f"unknown outputs {sorted(bad)}")


@dataclass(frozen=True)
class EpiRequest:
    """Two slab coordinates held fixed, two swept over a regular grid.

    ``variable`` names the (row, column) coordinates. With ``relative`` the
    column coordinate is an offset from the row coordinate, so each EPI row is
    the view of a virtual camera sitting at the row coordinate on the st
    plane.
    """

    fixed: dict[str, float]
    variable: tuple[str, str]
    ranges: tuple[tuple[float, float], tuple[float, float]]
    resolution: tuple[int, int]
    relative: bool = False

    def __post_init__(self):
        names = set(self.fixed) | set(self.variable)
        if len(self.fixed) != 2 or len(set(self.variable)) != 2 or names != {"s", "t", "u", "v"}:
            raise ValueError("need two fixed and two variable coordinates among s, t, u, v")
        if min(self.resolution) < 2:
            raise ValueError("EPI resolution must be >= 2 along both axes")


class RayRenderer:
    """Evaluates the model on arbitrary world rays against a fixed reference set."""

    def __init__(self, model: NeuralLightField, scene: Scene, reference_ids: Sequence[int], sampler: SamplerConfig):
        self.model = model
        self.scene = scene
        self.sampler = sampler
        self.reference_ids = list(reference_ids)
        self.references = [scene.camera(i) for i in self.reference_ids]
        self.images = [scene.images[i] for i in self.reference_ids]
        self._features = None

    @property
    def features(self):
        if self._features is None:
            with torch.no_grad():
                self._features = [self.model.conv_features(img) for img in self.images]
        return self._features

    @torch.no_grad()
    def __call__(self, rays: Ray, coords: Optional[np.ndarray] = None):
        """(rgb (N, 3) numpy, trace with numpy fields, coordinate validity (N,))."""
        n = rays.shape[0]
        if coords is None:
            coords, ok = ray_coords_masked(rays, self.scene.frame)
        else:
            ok = np.ones(n, dtype=bool)
        pad = (-n) % _CHUNK
        if pad:
            rays = Ray(np.concatenate([rays.origin, np.repeat(rays.origin[-1:], pad, 0)]),
                       np.concatenate([rays.direction, np.repeat(rays.direction[-1:], pad, 0)]))
            coords = np.concatenate([coords, np.repeat(coords[-1:], pad, 0)])
        rgbs, traces = [], []
        for start in range(0, n + pad, _CHUNK):
            sl = slice(start, start + _CHUNK)
            sub = rays[sl]
            if self.model.config.variant == "vanilla":
                rgb, trace = self.model(coords[sl], None)
            else:
                grid = sample_epipolar_points(sub, self.scene.frame, self.references, self.sampler)
                grid = gather_colors_and_features(grid, self.images, self.features)
                rgb, trace = self.model(coords[sl], grid, on_masked="flag")
            rgbs.append(rgb.double().numpy())
            if trace is not None:
                traces.append(trace)
        rgb = np.concatenate(rgbs)[:n]
        trace = _merge_traces(traces, n) if traces else None
        return rgb, trace, ok


def _merge_traces(traces: list[RenderTrace], n: int) -> dict:
    cat = lambda key: np.concatenate([np.asarray(getattr(t, key).double() if key not in ("view_valid", "ray_valid")
                                                  else getattr(t, key)) for t in traces])[:n]
    return {
        "alpha": cat("alpha"),
        "beta": cat("beta"),
        "deltas": np.concatenate([t.deltas for t in traces])[:n],
        "view_valid": cat("view_valid"),
        "ray_valid": cat("ray_valid"),
    }


def reference_views_for(scene: Scene, camera: CameraModel, sampler: SamplerConfig) -> list[int]:
    inference = SamplerConfig(sampler.K, sampler.N, sampler.P, sampler.depth_spacing, training_mode=False)
    return select_reference_views(camera, scene.train_cameras, inference)


def trace_depth(trace: dict) -> np.ndarray:
    """sum_j beta_j sum_i alpha_ij delta_i per ray."""
    per_view = np.einsum("nkp,np->nk", trace["alpha"], trace["deltas"])
    return np.sum(trace["beta"] * per_view, axis=-1)


def render_image(
    model: NeuralLightField,
    scene: Scene,
    request: RenderRequest,
    sampler: SamplerConfig = SamplerConfig(),
) -> dict[str, np.ndarray]:
    """Render every pixel of ``request.camera``.

    Returns a dict with the requested outputs plus ``flagged`` (rays no
    reference view sees; their color is 0 and ``color_debug`` shows magenta).
    """
    cam = request.camera
    w, h = cam.image_size
    refs = reference_views_for(scene, cam, sampler) if model.config.variant != "vanilla" else []
    renderer = RayRenderer(model, scene, refs, sampler)
    pixels = cam.pixel_grid().reshape(-1, 2)
    colors, alphas, betas, depths, flags = [], [], [], [], []
    for start in range(0, len(pixels), request.block_size):
        rays = ray_from_pixel(cam, pixels[start:start + request.block_size])
        rgb, trace, ok = renderer(rays)
        flagged = ~ok if trace is None else ~(ok & trace["ray_valid"])
        colors.append(np.where(flagged[:, None], 0.0, rgb))
        flags.append(flagged)
        if trace is not None:
            alphas.append(trace["alpha"])
            betas.append(trace["beta"])
            depths.append(trace_depth(trace))
    out = {"color": np.concatenate(colors).reshape(h, w, 3), "flagged": np.concatenate(flags).reshape(h, w)}
    out["color_debug"] = np.where(out["flagged"][..., None], DEBUG_COLOR, out["color"])
    out["reference_ids"] = np.array(refs)
    if depths:
        depth = np.concatenate(depths).reshape(h, w)
        if "depth" in request.outputs or "disparity" in request.outputs:
            out["depth"] = depth
            with np.errstate(divide="ignore"):
                out["disparity"] = np.where(out["flagged"], 0.0, 1.0 / depth)
        if "beta" in request.outputs:
            out["beta"] = np.concatenate(betas).reshape(h, w, -1)
        if "alpha" in request.outputs:
            out["alpha"] = np.concatenate(alphas).reshape(h, w, *alphas[0].shape[1:])
    return out


def correspondence_map(trace, view: int, ray: int = 0) -> tuple[int, np.ndarray]:
    """Index of the largest epipolar attention weight in ``view`` and the full distribution.

    Ties resolve to the lowest point index.
    """
    alpha = trace["alpha"] if isinstance(trace, dict) else trace.alpha.detach().numpy()
    dist = np.asarray(alpha[ray, view], dtype=np.float64)
    if not np.any(dist > 0):
        raise AllPointsMasked(f"view {view} has no valid epipolar point for ray {ray}")
    return int(np.argmax(dist)), dist


def log_scale(dist: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-distribution log scaling to [0, 1] for display: log(max(a, floor)) mapped from [log floor, log max]."""
    top = max(float(dist.max()), floor * 10)
    val = np.log(np.maximum(dist, floor))
    return (val - np.log(floor)) / (np.log(top) - np.log(floor))


def disparity_map(model, scene: Scene, camera: CameraModel, sampler: SamplerConfig = SamplerConfig(),
                  block_size: int = 4096) -> dict[str, np.ndarray]:
    """Attention-weighted depth per pixel; ``disparity`` is 1/depth, ``preview`` is normalized to [0, 1]."""
    out = render_image(model, scene, RenderRequest(camera, block_size, ("disparity",)), sampler)
    disp = out["disparity"]
    good = ~out["flagged"]
    lo, hi = 1.0 / scene.frame.far, 1.0 / scene.frame.near
    preview = np.where(good, (disp - lo) / (hi - lo), 0.0)
    return {"depth": out["depth"], "disparity": disp, "preview": np.clip(preview, 0, 1), "flagged": out["flagged"]}


_SLAB_INDEX = {"s": 0, "t": 1, "u": 2, "v": 3}


def epi_coordinates(request: EpiRequest) -> np.ndarray:
    """Slab coordinates of every EPI pixel, shape (rows, cols, 4)."""
    (r0, r1), (c0, c1) = request.ranges
    rows, cols = request.resolution
    a = np.linspace(r0, r1, rows)[:, None] * np.ones((1, cols))
    b = np.ones((rows, 1)) * np.linspace(c0, c1, cols)[None, :]
    coords = np.zeros((rows, cols, 4))
    for name, value in request.fixed.items():
        coords[..., _SLAB_INDEX[name]] = value
    ra, rb = request.variable
    coords[..., _SLAB_INDEX[ra]] = a
    coords[..., _SLAB_INDEX[rb]] = b + (a if request.relative else 0.0)
    return coords


def epi_slice(model, scene: Scene, request: EpiRequest, sampler: SamplerConfig = SamplerConfig()) -> dict:
    """Model colors over a 2D slice of slab coordinates (rows x cols x 3).

    Reference views are chosen per EPI row: the cameras nearest to where the
    row's rays cross the z = 0 camera plane, on average.
    """
    if scene.parametrization != "slab":
        raise ConfigError("EPIs need the slab parametrization")
    coords = epi_coordinates(request)
    rows, cols = request.resolution
    rays = slab_to_ray(coords.reshape(-1, 4), scene.frame)
    # slab rays always have |d_z| = 1, so parallelism is judged relative to |d|
    parallel = ~(np.abs(rays.direction[:, 2]) > 1e-9 * np.linalg.norm(rays.direction, axis=-1))
    if parallel.all():
        raise ParallelRay("every EPI ray is parallel to the slab planes")
    image = np.zeros((rows * cols, 3))
    flagged = parallel.copy()
    groups: dict[tuple, list[int]] = {}
    for r in range(rows):
        center = rays.origin[r * cols:(r + 1) * cols].mean(axis=0)
        virtual = CameraModel(np.eye(3), np.eye(3), -center, (1, 1), view_id=-1)
        refs = tuple(reference_views_for(scene, virtual, sampler)) if model.config.variant != "vanilla" else ()
        groups.setdefault(refs, []).extend(range(r * cols, (r + 1) * cols))
    for refs, idx in groups.items():
        idx = np.array([i for i in idx if not parallel[i]])
        if idx.size == 0:
            continue
        renderer = RayRenderer(model, scene, refs, sampler)
        rgb, trace, _ = renderer(rays[idx], coords.reshape(-1, 4)[idx])
        image[idx] = rgb
        if trace is not None:
            flagged[idx] |= ~trace["ray_valid"]
    image[flagged] = 0.0
    return {"image": image.reshape(rows, cols, 3), "flagged": flagged.reshape(rows, cols), "coords": coords}


def view_attention_image(model, scene: Scene, camera: CameraModel, sampler: SamplerConfig,
                         block_size: int = 4096) -> np.ndarray:
    """(beta_1, beta_2, beta_3) of every pixel as an RGB image."""
    if sampler.K != 3:
        raise ConfigError(f"view attention images need exactly K=3 reference views, got K={sampler.K}")
    out = render_image(model, scene, RenderRequest(camera, block_size, ("beta",)), sampler)
    return np.where(out["flagged"][..., None], 0.0, out["beta"])
