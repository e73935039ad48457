"""Fourier features, real spherical harmonics and camera embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import UnknownView


@dataclass(frozen=True)
class FourierConfig:
    num_frequencies: int = 5
    include_input: bool = False

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ValueError("num_frequencies must be >= 1")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.num_frequencies + int(self.include_input))


@dataclass(frozen=True)
class SphericalConfig:
    max_degree: int = 4
    # include the sin(l*phi) partner of every sectoral term as well
    sectoral_pairs: bool = False

    def per_point_dim(self) -> int:
        extra = self.max_degree if self.sectoral_pairs else 0
        return 2 * self.max_degree + 1 + extra

    def out_dim(self) -> int:
        return 2 * self.per_point_dim()


def fourier_encode(values, config: FourierConfig = FourierConfig()):
    """Per scalar ``w``: sin(2^k w) for k < L, then cos(2^k w) for k < L.

    Blocks are concatenated over the last axis in input order. Works on numpy
    arrays and torch tensors alike.
    """
    L = config.num_frequencies
    if isinstance(values, torch.Tensor):
        scales = 2.0 ** torch.arange(L, dtype=values.dtype, device=values.device)
        xb = values[..., None] * scales
        parts = [torch.sin(xb), torch.cos(xb)]
        if config.include_input:
            parts.insert(0, values[..., None])
        return torch.cat(parts, dim=-1).flatten(-2)
    values = np.asarray(values, dtype=np.float64)
    xb = values[..., None] * 2.0 ** np.arange(L)
    parts = [np.sin(xb), np.cos(xb)]
    if config.include_input:
        parts.insert(0, values[..., None])
    out = np.concatenate(parts, axis=-1)
    return out.reshape(out.shape[:-2] + (-1,))


def _zonal(max_degree, x):
    """Orthonormal Y_l^0 for l = 0..max_degree via the Legendre three-term recurrence."""
    p_prev, p = np.ones_like(x), x
    legendre = [p_prev, p]
    for l in range(1, max_degree):
        p_prev, p = p, ((2 * l + 1) * x * p - l * p_prev) / (l + 1)
        legendre.append(p)
    return [math.sqrt((2 * l + 1) / (4 * math.pi)) * legendre[l] for l in range(max_degree + 1)]


def _sectoral_norm(l):
    # sqrt(2) * N_l^l * (2l-1)!!, with N_l^m = sqrt((2l+1)/(4pi) * (l-m)!/(l+m)!)
    double_fact = math.prod(range(2 * l - 1, 0, -2))
    return math.sqrt(2.0) * math.sqrt((2 * l + 1) / (4 * math.pi) / math.factorial(2 * l)) * double_fact


def sh_point(theta, phi, config: SphericalConfig = SphericalConfig()) -> np.ndarray:
    """Zonal then sectoral real harmonics at one direction, shape (..., per_point_dim)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n = config.max_degree
    cols = _zonal(n, np.cos(theta))
    s = np.sin(theta)
    cols += [_sectoral_norm(l) * s**l * np.cos(l * phi) for l in range(1, n + 1)]
    if config.sectoral_pairs:
        cols += [_sectoral_norm(l) * s**l * np.sin(l * phi) for l in range(1, n + 1)]
    return np.stack(cols, axis=-1)


def sh_encode(coords, config: SphericalConfig = SphericalConfig()) -> np.ndarray:
    """Encode (theta1, phi1, theta2, phi2) by concatenating both points' harmonics."""
    values = getattr(coords, "values", coords)
    values = np.asarray(values, dtype=np.float64)
    first = sh_point(values[..., 0], values[..., 1], config)
    second = sh_point(values[..., 2], values[..., 3], config)
    return np.concatenate([first, second], axis=-1)


class CameraEmbeddingTable(nn.Module):
    """One learnable vector per training view."""

    def __init__(self, num_views: int, dim: int = 256, std: float = 0.02):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_views, dim))
        nn.init.trunc_normal_(self.weight, std=std, a=-2 * std, b=2 * std)

    @property
    def num_views(self) -> int:
        return self.weight.shape[0]

    def forward(self, view_ids) -> torch.Tensor:
        ids = torch.as_tensor(view_ids, dtype=torch.long, device=self.weight.device)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.num_views):
            raise UnknownView(f"view ids {ids.tolist()} outside the {self.num_views}-row embedding table")
        return self.weight[ids]


def embed_camera(table: CameraEmbeddingTable, view_id) -> torch.Tensor:
    return table(view_id)
