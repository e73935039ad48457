"""Two-stage attention model over epipolar samples, plus MLP ablations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoding import CameraEmbeddingTable, FourierConfig, SphericalConfig, fourier_encode, sh_encode
from .errors import AllViewsMasked, ConfigError, ShapeMismatch
from .sampler import EpipolarSampleGrid

VARIANTS = ("nlf", "vanilla", "one_mlp", "two_mlp")
MASK_LOGIT = -1e9


@dataclass(frozen=True)
class ModelConfig:
    num_views: int = 16  # rows in the camera embedding table
    parametrization: str = "slab"
    model_dim: int = 64
    num_blocks: int = 2
    mlp_ratio: int = 4
    num_heads: int = 1
    conv_channels: int = 32
    conv_kernel: int = 5
    embed_dim: int = 256
    num_frequencies: int = 5
    sh_degree: int = 4
    sh_sectoral_pairs: bool = False
    variant: str = "nlf"
    # ablation baselines
    K: int = 4
    P: int = 32
    baseline_width: int = 256
    vanilla_depth: int = 8
    one_mlp_layers: int = 12

    def __post_init__(self):
        if self.num_heads != 1:
            raise ConfigError("only single-headed attention is supported")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if self.parametrization not in ("slab", "two_sphere", "plucker"):
            raise ConfigError(f"unknown parametrization {self.parametrization!r}")

    @property
    def fourier(self) -> FourierConfig:
        return FourierConfig(self.num_frequencies)

    @property
    def spherical(self) -> SphericalConfig:
        return SphericalConfig(self.sh_degree, self.sh_sectoral_pairs)

    @property
    def ray_dim(self) -> int:
        if self.parametrization == "two_sphere":
            return self.spherical.out_dim()
        return self.fourier.out_dim(6 if self.parametrization == "plucker" else 4)

    @property
    def point_token_dim(self) -> int:
        return self.ray_dim + self.fourier.out_dim(3) + self.embed_dim + self.conv_channels + 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class RenderTrace:
    alpha: torch.Tensor  # (B, K, P)
    beta: torch.Tensor  # (B, K)
    deltas: np.ndarray  # (B, P)
    r_tilde: torch.Tensor  # (B, K, D), epipolar-stage target outputs
    r_hat: torch.Tensor  # (B, D)
    z: torch.Tensor  # (B, K, D)
    z_tilde: torch.Tensor  # (B, K, D)
    view_valid: torch.Tensor  # (B, K) bool
    ray_valid: torch.Tensor  # (B,) bool

    def detach(self) -> "RenderTrace":
        return RenderTrace(
            *(v.detach() if isinstance(v, torch.Tensor) else v for v in
              (self.alpha, self.beta, self.deltas, self.r_tilde, self.r_hat, self.z, self.z_tilde,
               self.view_valid, self.ray_valid))
        )


def _linear(fan_in, fan_out, bias=True):
    layer = nn.Linear(fan_in, fan_out, bias=bias)
    nn.init.trunc_normal_(layer.weight, std=0.02, a=-0.04, b=0.04)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


class TransformerBlock(nn.Module):
    """Single-head self-attention and a GELU MLP, each followed by residual + LayerNorm."""

    def __init__(self, dim: int, mlp_ratio: int = 4):
        super().__init__()
        self.query = _linear(dim, dim)
        # a key bias shifts every logit of a row equally, so it is omitted
        self.key = _linear(dim, dim, bias=False)
        self.value = _linear(dim, dim)
        self.out = _linear(dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.fc1 = _linear(dim, mlp_ratio * dim)
        self.fc2 = _linear(mlp_ratio * dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.scale = 1.0 / math.sqrt(dim)

    def attention(self, x, mask):
        logits = self.query(x) @ self.key(x).transpose(-1, -2) * self.scale
        if mask is not None:
            logits = logits.masked_fill(~mask[..., None, :], MASK_LOGIT)
        return self.out(torch.softmax(logits, dim=-1) @ self.value(x))

    def forward(self, x, mask=None):
        x = self.norm1(x + self.attention(x, mask))
        return self.norm2(x + self.fc2(F.gelu(self.fc1(x))))


class Transformer(nn.Module):
    def __init__(self, dim: int, num_blocks: int, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, mlp_ratio) for _ in range(num_blocks))

    def forward(self, x, mask=None):
        for block in self.blocks:
            x = block(x, mask)
        return x


def run_transformer(stack: Transformer, tokens: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    return stack(tokens, mask)


def attention_pool(query, items, weight, mask):
    """Softmax-weighted average of ``items`` (..., S, D) with logits W[query || item].

    ``weight`` has shape (2D,). The query half adds one constant to every
    logit of a row and cancels in the softmax, so only the item half is
    evaluated. Masked items get weight exactly 0; rows with no valid item get
    all-zero weights. Returns (pooled (..., D), weights (..., S), row_valid).
    """
    D = items.shape[-1]
    logits = items @ weight[D:]
    logits = logits.masked_fill(~mask, MASK_LOGIT)
    w = torch.softmax(logits, dim=-1)
    row_valid = mask.any(dim=-1)
    w = torch.where(mask & row_valid[..., None], w, torch.zeros((), dtype=w.dtype))
    return (w[..., None] * items).sum(dim=-2), w, row_valid


def epipolar_aggregate(r_tilde, y_tilde, w1, mask):
    """Pool the P transformed epipolar tokens of every view into one view feature."""
    return attention_pool(r_tilde, y_tilde, w1, mask)


def view_aggregate(r_hat, z_tilde, w2, mask):
    """Pool the K transformed view features into the target-ray feature."""
    return attention_pool(r_hat, z_tilde, w2, mask)


def _mlp(dims, final_act=False):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(_linear(a, b))
        if final_act or i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class SkipMLP(nn.Module):
    """Width-preserving ReLU MLP that adds the running input back every ``skip_every`` layers."""

    def __init__(self, width, num_layers, skip_every=4):
        super().__init__()
        self.layers = nn.ModuleList(_linear(width, width) for _ in range(num_layers))
        self.skip_every = skip_every

    def forward(self, x):
        skip = x
        for i, layer in enumerate(self.layers, start=1):
            x = F.relu(layer(x))
            if i % self.skip_every == 0:
                x = x + skip
                skip = x
        return x


class NeuralLightField(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        D = c.model_dim
        self.conv = nn.Conv2d(3, c.conv_channels, c.conv_kernel, padding=c.conv_kernel // 2)
        self.embeddings = CameraEmbeddingTable(c.num_views, c.embed_dim)
        if c.variant == "vanilla":
            half = c.vanilla_depth // 2
            self.vanilla_a = _mlp([c.ray_dim] + [c.baseline_width] * half, final_act=True)
            self.vanilla_b = _mlp([c.baseline_width + c.ray_dim] + [c.baseline_width] * (c.vanilla_depth - half),
                                  final_act=True)
            self.head = _linear(c.baseline_width, 3)
            return
        if c.variant == "one_mlp":
            W = c.baseline_width
            self.one_in = _linear(c.point_token_dim + c.ray_dim, W)
            self.one_body = SkipMLP(W, c.one_mlp_layers)
            self.reduce_points = _linear(c.P, 1)
            self.reduce_views = _linear(c.K, 1)
            self.head = _linear(W, 3)
            return
        self.point_proj = _linear(c.point_token_dim, D)
        self.target_proj = _linear(c.ray_dim, D)
        if c.variant == "two_mlp":
            self.epipolar_mlp = _mlp([(c.P + 1) * D, c.mlp_ratio * D, D])
            self.view_mlp = _mlp([(c.K + 1) * D, c.mlp_ratio * D, D])
        else:
            self.epipolar = Transformer(D, c.num_blocks, c.mlp_ratio)
            self.view = Transformer(D, c.num_blocks, c.mlp_ratio)
            self.w1 = nn.Parameter(torch.empty(2 * D))
            self.w2 = nn.Parameter(torch.empty(2 * D))
            nn.init.trunc_normal_(self.w1, std=0.02, a=-0.04, b=0.04)
            nn.init.trunc_normal_(self.w2, std=0.02, a=-0.04, b=0.04)
        self.head = _linear(D, 3)

    @property
    def dtype(self):
        return self.head.weight.dtype

    @property
    def device(self):
        return self.head.weight.device

    # -- inputs -------------------------------------------------------------

    def conv_features(self, image) -> torch.Tensor:
        """(H, W, 3) image in [0, 1] -> (H, W, C) features, same spatial size."""
        x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image,
                            dtype=self.dtype, device=self.device)
        return self.conv(x.permute(2, 0, 1)[None])[0].permute(1, 2, 0)

    def encode_ray(self, coords) -> torch.Tensor:
        coords = getattr(coords, "values", coords)
        if self.config.parametrization == "two_sphere":
            enc = sh_encode(np.asarray(coords), self.config.spherical)
        else:
            enc = fourier_encode(np.asarray(coords), self.config.fourier)
        return torch.as_tensor(enc, dtype=self.dtype, device=self.device)

    def raw_point_tokens(self, grid: EpipolarSampleGrid) -> torch.Tensor:
        """Unprojected point tokens [ray enc || point enc || camera embedding || features || color]."""
        if not grid.populated:
            raise ShapeMismatch("grid has no colors/features; gather them first")
        B, K, P = grid.valid.shape
        c = self.config
        if grid.features.shape[-1] != c.conv_channels:
            raise ShapeMismatch(f"expected {c.conv_channels} feature channels, got {grid.features.shape[-1]}")
        ray_enc = self.encode_ray(grid.ray_coords)
        if ray_enc.shape[-1] != c.ray_dim:
            raise ShapeMismatch(f"ray encoding has {ray_enc.shape[-1]} dims, expected {c.ray_dim}")
        point_enc = torch.as_tensor(fourier_encode(grid.points3d, c.fourier), dtype=self.dtype, device=self.device)
        cam = self.embeddings(grid.view_ids)[None, :, None, :].expand(B, K, P, -1)
        return torch.cat(
            [ray_enc, point_enc, cam, grid.features.to(self.dtype), grid.colors.to(self.dtype)], dim=-1
        )

    def build_tokens(self, grid: EpipolarSampleGrid, target_coords):
        """Projected target token (B, D), point tokens (B, K, P, D) and the validity mask."""
        if not grid.populated:
            raise ShapeMismatch("grid has no colors/features; gather them first")
        c = self.config
        target = self.target_proj(self.encode_ray(target_coords))
        # The projection acts block-wise on the concatenated token, so the
        # per-view camera embedding and the view-independent point encoding
        # are projected once instead of once per (ray, view, point).
        W = self.point_proj.weight
        edges = np.cumsum([0, c.ray_dim, c.fourier.out_dim(3), c.embed_dim, c.conv_channels + 3])
        w_ray, w_pt, w_cam, w_img = (W[:, a:b] for a, b in zip(edges[:-1], edges[1:]))
        ray_enc = self.encode_ray(grid.ray_coords)
        if ray_enc.shape[-1] != c.ray_dim:
            raise ShapeMismatch(f"ray encoding has {ray_enc.shape[-1]} dims, expected {c.ray_dim}")
        if grid.features.shape[-1] != c.conv_channels:
            raise ShapeMismatch(f"expected {c.conv_channels} feature channels, got {grid.features.shape[-1]}")
        pts = torch.as_tensor(fourier_encode(grid.points3d[:, 0], c.fourier), dtype=self.dtype, device=self.device)
        cam = self.embeddings(grid.view_ids) @ w_cam.T  # (K, D)
        img = torch.cat([grid.features.to(self.dtype), grid.colors.to(self.dtype)], dim=-1)
        points = (ray_enc @ w_ray.T + img @ w_img.T + (pts @ w_pt.T)[:, None]
                  + cam[None, :, None, :] + self.point_proj.bias)
        mask = torch.as_tensor(grid.valid, device=self.device)
        return target, points, mask

    def predict_color(self, feature: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.head(feature))

    # -- forward ------------------------------------------------------------

    def forward(self, target_coords, grid: Optional[EpipolarSampleGrid] = None, on_masked: str = "raise"):
        """Predict (B, 3) colors; returns (rgb, trace). ``trace`` is None for MLP baselines."""
        variant = self.config.variant
        if variant == "vanilla":
            return self._vanilla(target_coords), None
        if variant == "one_mlp":
            return self._one_mlp(target_coords, grid), None
        if variant == "two_mlp":
            return self._two_mlp(target_coords, grid), None
        return self._nlf(target_coords, grid, on_masked)

    def _nlf(self, target_coords, grid, on_masked):
        target, points, mask = self.build_tokens(grid, target_coords)
        B, K, P, D = points.shape
        # stage 1: one sequence [target, y_1..y_P] per (ray, view)
        seq = torch.cat([target[:, None, None, :].expand(B, K, 1, D), points], dim=2)
        seq_mask = torch.cat([torch.ones(B, K, 1, dtype=torch.bool, device=mask.device), mask], dim=2)
        out = self.epipolar(seq.reshape(B * K, P + 1, D), seq_mask.reshape(B * K, P + 1))
        out = out.reshape(B, K, P + 1, D)
        r_tilde, y_tilde = out[:, :, 0], out[:, :, 1:]
        z, alpha, view_valid = epipolar_aggregate(r_tilde, y_tilde, self.w1, mask)
        # stage 2: [target, z^1..z^K]
        seq2 = torch.cat([target[:, None, :], z], dim=1)
        mask2 = torch.cat([torch.ones(B, 1, dtype=torch.bool, device=mask.device), view_valid], dim=1)
        out2 = self.view(seq2, mask2)
        r_hat, z_tilde = out2[:, 0], out2[:, 1:]
        feature, beta, ray_valid = view_aggregate(r_hat, z_tilde, self.w2, view_valid)
        if on_masked == "raise" and not bool(ray_valid.all()):
            bad = torch.nonzero(~ray_valid).flatten().tolist()
            raise AllViewsMasked(f"rays {bad[:8]} have no valid epipolar sample in any reference view")
        rgb = self.predict_color(feature)
        trace = RenderTrace(alpha, beta, grid.deltas, r_tilde, r_hat, z, z_tilde, view_valid, ray_valid)
        return rgb, trace

    def _vanilla(self, target_coords):
        enc = self.encode_ray(target_coords)
        h = self.vanilla_a(enc)
        h = self.vanilla_b(torch.cat([h, enc], dim=-1))
        return self.predict_color(h)

    def _one_mlp(self, target_coords, grid):
        raw = self.raw_point_tokens(grid)
        B, K, P, _ = raw.shape
        self._check_baseline_shape(K, P)
        ray = self.encode_ray(target_coords)[:, None, None, :].expand(B, K, P, -1)
        mask = torch.as_tensor(grid.valid, device=self.device)[..., None]
        h = self.one_body(self.one_in(torch.cat([raw, ray], dim=-1)))
        h = torch.where(mask, h, torch.zeros((), dtype=h.dtype))
        h = self.reduce_points(h.transpose(-1, -2))[..., 0]  # (B, K, W)
        h = self.reduce_views(h.transpose(-1, -2))[..., 0]  # (B, W)
        return self.predict_color(h)

    def _two_mlp(self, target_coords, grid):
        target, points, mask = self.build_tokens(grid, target_coords)
        B, K, P, D = points.shape
        self._check_baseline_shape(K, P)
        points = torch.where(mask[..., None], points, torch.zeros((), dtype=points.dtype))
        seq = torch.cat([target[:, None, None, :].expand(B, K, 1, D), points], dim=2)
        z = self.epipolar_mlp(seq.reshape(B, K, (P + 1) * D))
        z = torch.where(mask.any(-1)[..., None], z, torch.zeros((), dtype=z.dtype))
        feature = self.view_mlp(torch.cat([target[:, None, :], z], dim=1).reshape(B, (K + 1) * D))
        return self.predict_color(feature)

    def _check_baseline_shape(self, K, P):
        if (K, P) != (self.config.K, self.config.P):
            raise ShapeMismatch(f"baseline built for K={self.config.K}, P={self.config.P}; got K={K}, P={P}")

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters bucketed by the component they belong to."""
        groups: dict[str, list] = {}
        prefixes = {
            "conv": "conv", "embeddings": "embeddings", "point_proj": "token_projection",
            "target_proj": "target_projection", "epipolar.": "epipolar_transformer",
            "view.": "view_transformer", "w1": "w1", "w2": "w2", "head": "color_head",
        }
        for name, p in self.named_parameters():
            group = next((g for pre, g in prefixes.items() if name.startswith(pre)), name.split(".")[0])
            groups.setdefault(group, []).append((name, p))
        return groups


def conv_features(model: NeuralLightField, image) -> torch.Tensor:
    return model.conv_features(image)


def forward(model: NeuralLightField, target_coords, grid, on_masked="raise"):
    return model(target_coords, grid, on_masked)


def mlp_baseline_forward(model: NeuralLightField, target_coords, grid=None) -> torch.Tensor:
    if model.config.variant not in ("vanilla", "one_mlp", "two_mlp"):
        raise ConfigError("model is not an MLP baseline")
    return model(target_coords, grid)[0]
