"""Losses, Adam with warmup + linear decay, the training loop and gradient checks."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .errors import NonFiniteLoss
from .geometry import ray_coords_masked, ray_from_pixel
from .model import NeuralLightField, RenderTrace
from .sampler import (
    EpipolarSampleGrid,
    SamplerConfig,
    gather_colors_and_features,
    sample_epipolar_points,
    select_reference_views,
)
from .scene import Scene

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    total_steps: int = 20000
    warmup_steps: int = 500
    base_lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aux_weight: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    log_every: int = 100

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, model: torch.nn.Module) -> "OptState":
        m = {k: torch.zeros_like(p) for k, p in model.named_parameters()}
        v = {k: torch.zeros_like(p) for k, p in model.named_parameters()}
        return cls(m, v, 0)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then linear decay to 0 at total_steps."""
    w, T, lr = config.warmup_steps, config.total_steps, config.base_lr
    if step < w:
        return lr * step / w
    return lr * max(0.0, (T - step) / (T - w))


@torch.no_grad()
def adam_update(model: torch.nn.Module, state: OptState, lr: float, config: TrainConfig) -> None:
    """One bias-corrected Adam step in place; parameters without gradients are skipped."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in model.named_parameters():
        if p.grad is None:
            continue
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(p.grad, alpha=1 - b1)
        v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + config.eps))


def aux_color(trace: RenderTrace, colors: torch.Tensor) -> torch.Tensor:
    """sum_j beta_j sum_i alpha_ij c_ij for colors (B, K, P, 3)."""
    per_view = (trace.alpha[..., None] * colors).sum(dim=2)
    return (trace.beta[..., None] * per_view).sum(dim=1)


def loss_fn(pred, aux, gt, aux_weight: float = 1.0) -> torch.Tensor:
    """Mean over rays and channels of squared error, plus the weighted auxiliary term."""
    total = ((pred - gt) ** 2).mean()
    if aux is not None and aux_weight:
        total = total + aux_weight * ((aux - gt) ** 2).mean()
    return total


# -- batches -------------------------------------------------------------------


@dataclass
class RayBatch:
    view_id: int
    pixels: np.ndarray  # (B, 2)
    target_coords: np.ndarray  # (B, C)
    gt: torch.Tensor  # (B, 3)
    grid: Optional[EpipolarSampleGrid]  # geometry only
    reference_ids: list[int]
    reference_images: list[np.ndarray] = field(default_factory=list)

    def populated_grid(self, model: NeuralLightField, feature_cache: Optional[dict] = None):
        """Grid with colors and conv features gathered (features stay in the autograd graph)."""
        if self.grid is None:
            return None
        fmaps = []
        for vid, img in zip(self.reference_ids, self.reference_images):
            if feature_cache is not None and vid in feature_cache:
                fmaps.append(feature_cache[vid])
                continue
            f = model.conv_features(img)
            if feature_cache is not None:
                feature_cache[vid] = f
            fmaps.append(f)
        return gather_colors_and_features(self.grid, self.reference_images, fmaps)


def make_batch(
    model: NeuralLightField,
    scene: Scene,
    view_id: int,
    pixels: np.ndarray,
    sampler: SamplerConfig,
    rng: Optional[np.random.Generator] = None,
    reference_ids: Optional[list[int]] = None,
) -> RayBatch:
    """Assemble target rays, ground truth and the epipolar geometry for one image."""
    camera = scene.camera(view_id)
    rays = ray_from_pixel(camera, pixels)
    coords, _ = ray_coords_masked(rays, scene.frame)
    img = scene.images[view_id]
    xi, yi = np.round(pixels[:, 0]).astype(int), np.round(pixels[:, 1]).astype(int)
    gt = torch.as_tensor(img[yi, xi], dtype=model.dtype)
    grid = None
    if model.config.variant != "vanilla":
        if reference_ids is None:
            reference_ids = select_reference_views(camera, scene.train_cameras, sampler, rng)
        refs = [scene.camera(i) for i in reference_ids]
        grid = sample_epipolar_points(rays, scene.frame, refs, sampler)
    ids = list(reference_ids or [])
    return RayBatch(view_id, pixels, coords, gt, grid, ids, [scene.images[i] for i in ids])


def sample_training_batch(model, scene: Scene, sampler: SamplerConfig, batch_size: int, rng) -> RayBatch:
    """Uniformly pick a training image, then ``batch_size`` random pixels from it."""
    view_id = int(rng.choice(scene.train_ids))
    w, h = scene.camera(view_id).image_size
    n = min(batch_size, w * h)
    flat = rng.choice(w * h, size=n, replace=False)
    pixels = np.stack([flat % w, flat // w], axis=-1).astype(np.float64)
    train_sampler = SamplerConfig(sampler.K, sampler.N, sampler.P, sampler.depth_spacing, training_mode=True)
    return make_batch(model, scene, view_id, pixels, train_sampler, rng)


def batch_loss(model: NeuralLightField, batch: RayBatch, aux_weight: float):
    """Loss over the rays of ``batch`` that see at least one reference view."""
    grid = batch.populated_grid(model)
    rgb, trace = model(batch.target_coords, grid, on_masked="flag")
    gt = batch.gt.to(rgb.dtype)
    aux = None
    if trace is not None:
        aux = aux_color(trace, grid.colors.to(rgb.dtype))
        keep = trace.ray_valid
        if not bool(keep.all()):
            rgb, gt, aux = rgb[keep], gt[keep], aux[keep]
    return loss_fn(rgb, aux, gt, aux_weight), rgb, trace


def train_step(model: NeuralLightField, opt_state: OptState, batch: RayBatch, config: TrainConfig):
    """Backpropagate the loss on ``batch`` and apply one Adam update. Returns the loss value."""
    model.zero_grad(set_to_none=True)
    loss, _, _ = batch_loss(model, batch, config.aux_weight)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLoss(
            f"loss became {value} at step {opt_state.step} (view {batch.view_id}, refs {batch.reference_ids})"
        )
    loss.backward()
    adam_update(model, opt_state, lr_schedule(opt_state.step, config), config)
    return value


class Trainer:
    """Per-scene training loop with optional metrics log and periodic checkpoints."""

    def __init__(
        self,
        model: NeuralLightField,
        scene: Scene,
        config: TrainConfig,
        sampler: SamplerConfig,
        opt_state: Optional[OptState] = None,
        metrics_path=None,
        checkpoint_path=None,
    ):
        self.model = model
        self.scene = scene
        self.config = config
        self.sampler = sampler
        self.opt_state = opt_state or OptState.zeros_like(model)
        self.rng = np.random.default_rng(config.seed)
        self.metrics_path = Path(metrics_path) if metrics_path else None
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.history: list[float] = []

    def run(self, steps: Optional[int] = None, callback: Optional[Callable[[int, float], None]] = None):
        from .scene import save_checkpoint

        cfg = self.config
        steps = cfg.total_steps - self.opt_state.step if steps is None else steps
        start = time.perf_counter()
        out = self.metrics_path.open("a") if self.metrics_path else None
        try:
            for _ in range(steps):
                batch = sample_training_batch(self.model, self.scene, self.sampler, cfg.batch_size, self.rng)
                lr = lr_schedule(self.opt_state.step, cfg)
                loss = train_step(self.model, self.opt_state, batch, cfg)
                self.history.append(loss)
                step = self.opt_state.step
                if out is not None and (step % cfg.log_every == 0 or step == 1):
                    out.write(f"{step}\t{loss:.8g}\t{lr:.6g}\t{time.perf_counter() - start:.3f}\n")
                    out.flush()
                if step % cfg.log_every == 0:
                    log.info("step %d loss %.6f lr %.3g", step, loss, lr)
                if callback is not None:
                    callback(step, loss)
                if self.checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    save_checkpoint(self.model, self.opt_state, self.checkpoint_path)
        finally:
            if out is not None:
                out.close()
        if self.checkpoint_path:
            save_checkpoint(self.model, self.opt_state, self.checkpoint_path)
        return self.history


# -- gradient checking ---------------------------------------------------------


def _extended_available() -> bool:
    return np.finfo(np.longdouble).eps < 1e-18


def grad_check(
    model: NeuralLightField,
    batch: RayBatch,
    aux_weight: float = 1.0,
    samples_per_group: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    corrupt: Optional[tuple[str, float]] = None,
    oracle: str = "auto",
    details: bool = False,
):
    """Max relative error between autograd gradients and central finite differences.

    Up to ``samples_per_group`` random coordinates are checked in every
    parameter group (all of them if the group is smaller). The relative error
    of a coordinate is |a - b| / max(|a|, |b|, 1e-8). ``corrupt=(group, f)``
    scales that group's autograd gradient by (1 + f) to exercise the harness.

    ``oracle`` picks how the finite-difference losses are evaluated:
    ``"exact"`` (attention model without transformer blocks only) moves the
    affine stage a coordinate enters by exactly +-h times its partial
    derivative and evaluates the nonlinear remainder in multiprecision;
    ``"extended"`` uses the numpy reference forward in long double, whose
    rounding noise is far below the float64 forward pass (at h = 1e-5 float64
    rounding alone is ~1e-12 on the difference quotient, too coarse for
    coordinates with gradients near 1e-8); ``"float64"`` re-runs the torch
    model itself. ``"auto"`` picks ``"exact"`` for block-free attention
    models, else ``"extended"`` for the attention model when the platform has
    an extended long double, else ``"float64"``.

    Returns the max error, or with ``details`` a dict holding it plus the
    per-group maxima and the worst coordinate.
    """
    nlf = model.config.variant == "nlf"
    if oracle == "auto":
        if nlf and model.config.num_blocks == 0:
            oracle = "exact"
        else:
            oracle = "extended" if nlf and _extended_available() else "float64"
    if oracle not in ("exact", "extended", "float64"):
        raise ValueError(f"unknown oracle {oracle!r}")
    rng = np.random.default_rng(seed)

    model.zero_grad(set_to_none=True)
    batch_loss(model, batch, aux_weight)[0].backward()
    grads = {name: (None if p.grad is None else p.grad.detach().double().cpu().numpy().reshape(-1))
             for name, p in model.named_parameters()}

    if oracle == "exact":
        from .reference import ReferenceLoss, ZeroBlockExactLoss, model_parameters

        exact = ZeroBlockExactLoss(ReferenceLoss(model.config, batch, aux_weight, np.longdouble),
                                   model_parameters(model, np.longdouble))

        def difference(name, idx):
            return exact.difference(name, idx, h)
    elif oracle == "extended":
        from .reference import ReferenceLoss, model_parameters

        ref = ReferenceLoss(model.config, batch, aux_weight, np.longdouble)
        params = model_parameters(model, np.longdouble)
        cache = ref.snapshot(params)

        def difference(name, idx):
            flat = params[name].reshape(-1)
            orig = flat[idx]
            stage = ref.stage_of(name)
            flat[idx] = orig + np.longdouble(h)
            plus = ref(params, stage, cache)
            flat[idx] = orig - np.longdouble(h)
            minus = ref(params, stage, cache)
            flat[idx] = orig
            return float((plus - minus) / (2 * np.longdouble(h)))
    else:
        named = dict(model.named_parameters())

        def difference(name, idx):
            flat = named[name].view(-1)
            orig = float(flat[idx])
            flat[idx] = orig + h
            plus = float(batch_loss(model, batch, aux_weight)[0])
            flat[idx] = orig - h
            minus = float(batch_loss(model, batch, aux_weight)[0])
            flat[idx] = orig
            return (plus - minus) / (2 * h)

    worst = 0.0
    per_group: dict[str, float] = {}
    worst_coord = None
    with torch.no_grad():
        for group, members in model.parameter_groups().items():
            per_group[group] = 0.0
            coords = [(name, idx) for name, p in members for idx in range(p.numel())]
            pick = rng.choice(len(coords), size=min(samples_per_group, len(coords)), replace=False)
            for k in pick:
                name, idx = coords[k]
                a = 0.0 if grads[name] is None else float(grads[name][idx])
                if corrupt is not None and corrupt[0] == group:
                    a *= 1 + corrupt[1]
                b = difference(name, idx)
                err = abs(a - b) / max(abs(a), abs(b), 1e-8)
                per_group[group] = max(per_group[group], err)
                if err > worst or worst_coord is None:
                    worst, worst_coord = max(worst, err), {"parameter": name, "index": int(idx),
                                                          "autograd": a, "finite_difference": b}
    if details:
        return {"max_rel_error": worst, "groups": per_group, "worst": worst_coord, "oracle": oracle}
    return worst
