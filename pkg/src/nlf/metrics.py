"""PSNR, SSIM and the summary average of the two (or three, with LPIPS)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ImageTooSmall, ShapeMismatch

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for signals in [0, 1], capped at 99 dB."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img, g):
    # separable 'valid' Gaussian filtering over the two spatial axes
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r:out.shape[0] - r, r:out.shape[1] - r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03), averaged over channels."""
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape[:2]}")
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter(x, g), _filter(y, g)
        sxx = _filter(x * x, g) - mx * mx
        syy = _filter(y * y, g) - my * my
        sxy = _filter(x * y, g) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


def avg_metric(psnr_db: float, ssim_value: float, lpips: Optional[float] = None) -> float:
    """Geometric mean of 10^(-PSNR/10), sqrt(1 - SSIM) and (when given) LPIPS."""
    terms = [10.0 ** (-psnr_db / 10.0), math.sqrt(max(0.0, 1.0 - ssim_value))]
    if lpips is not None:
        terms.append(lpips)
    if any(t == 0.0 for t in terms):
        return 0.0
    return math.exp(sum(math.log(t) for t in terms) / len(terms))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_value: float, lpips: Optional[float] = None) -> None:
        self.rows.append({
            "image": name,
            "psnr": psnr_db,
            "ssim": ssim_value,
            "lpips": lpips,
            "avg": avg_metric(psnr_db, ssim_value, lpips),
        })

    def mean(self) -> dict:
        out = {"image": "mean"}
        for key in ("psnr", "ssim", "avg"):
            out[key] = float(np.mean([r[key] for r in self.rows])) if self.rows else float("nan")
        lp = [r["lpips"] for r in self.rows]
        out["lpips"] = float(np.mean(lp)) if lp and all(v is not None for v in lp) else None
        return out

    def to_text(self) -> str:
        """Tab-separated table, one row per image plus a mean row."""
        lines = ["image\tpsnr_db\tssim\tlpips\tavg"]
        note = False
        for r in self.rows + [self.mean()]:
            lp = "-" if r["lpips"] is None else f"{r['lpips']:.4f}"
            note |= r["lpips"] is None
            lines.append(f"{r['image']}\t{r['psnr']:.3f}\t{r['ssim']:.4f}\t{lp}\t{r['avg']:.5f}")
        if note:
            lines.append("# avg without lpips is the two-term geometric mean")
        return "\n".join(lines) + "\n"
