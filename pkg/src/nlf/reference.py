"""Independent numpy forward pass of the attention model, at any float precision.

Written directly from the model equations rather than by calling the torch
modules, so it doubles as an oracle for the forward pass. Evaluated in
``np.longdouble`` (80-bit on x86) it supplies finite-difference losses whose
rounding noise sits well below that of a float64 forward pass, which is what
the gradient checker needs to resolve small gradients at h = 1e-5.
"""

from __future__ import annotations

from typing import Mapping, Optional

import mpmath
import numpy as np

from .encoding import fourier_encode

LN_EPS = 1e-5


_ERF_SPLIT = 3.0
_CF_TERMS = 120


def erf(x: np.ndarray) -> np.ndarray:
    """erf at the precision of ``x``.

    Below |x| = 3: erf(x) = 2x/sqrt(pi) e^(-x^2) sum_n (2x^2)^n / (1 3 5 ... (2n+1)),
    whose terms are all positive, so there is no cancellation. Above it:
    the continued fraction of erfc, evaluated bottom-up at fixed depth.
    """
    dt = x.dtype
    ax = np.abs(x)
    out = np.empty_like(ax)
    small = ax < _ERF_SPLIT
    a = ax[small]
    two_x2 = 2 * a * a
    term = np.ones_like(a)
    total = np.ones_like(a)
    n = 0
    while a.size:
        n += 1
        term = term * two_x2 / (2 * n + 1)
        total = total + term
        if not np.any(term > total * np.finfo(dt).eps):
            break
    out[small] = 2 * a / np.sqrt(4 * np.arctan(dt.type(1))) * np.exp(-a * a) * total
    b = ax[~small]
    if b.size:
        # erfc(b) = e^(-b^2)/sqrt(pi) / (b + (1/2)/(b + 1/(b + (3/2)/(b + ...))))
        frac = b.copy()
        for k in range(_CF_TERMS, 0, -1):
            frac = b + dt.type(k / 2) / frac
        out[~small] = 1 - np.exp(-b * b) / np.sqrt(4 * np.arctan(dt.type(1))) / frac
    return np.sign(x) * out


def gelu(x):
    return x * (1 + erf(x / np.sqrt(x.dtype.type(2)))) / 2


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def softmax_masked(logits, mask):
    """Softmax over the last axis with masked entries exactly 0; all-masked rows give zeros."""
    neg = np.where(mask, logits, -np.inf)
    top = np.max(neg, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0)
    e = np.where(mask, np.exp(np.where(mask, logits, 0) - top), 0)
    s = np.sum(e, axis=-1, keepdims=True)
    return np.where(s > 0, e / np.where(s > 0, s, 1), 0)


def layer_norm(x, weight, bias):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + x.dtype.type(LN_EPS)) * weight + bias


def linear(x, p, name, bias=True):
    y = x @ p[name + ".weight"].T
    return y + p[name + ".bias"] if bias else y


def block(x, mask, p, pre, scale):
    q = linear(x, p, pre + ".query")
    k = linear(x, p, pre + ".key", bias=False)
    v = linear(x, p, pre + ".value")
    logits = q @ np.swapaxes(k, -1, -2) * scale
    a = softmax_masked(logits, np.broadcast_to(mask[..., None, :], logits.shape))
    x = layer_norm(x + linear(a @ v, p, pre + ".out"), p[pre + ".norm1.weight"], p[pre + ".norm1.bias"])
    h = linear(gelu(linear(x, p, pre + ".fc1")), p, pre + ".fc2")
    return layer_norm(x + h, p[pre + ".norm2.weight"], p[pre + ".norm2.bias"])


def pool(items, weight, mask):
    D = items.shape[-1]
    w = softmax_masked(items @ weight[D:], mask)
    return (w[..., None] * items).sum(-2), w, mask.any(-1)


def conv2d(image, weight, bias):
    """'same' 2D cross-correlation of an (H, W, Cin) image with (Cout, Cin, k, k) weights."""
    H, W, _ = image.shape
    k = weight.shape[-1]
    r = k // 2
    pad = np.zeros((H + 2 * r, W + 2 * r, image.shape[2]), dtype=weight.dtype)
    pad[r:r + H, r:r + W] = image
    out = np.broadcast_to(bias, (H, W, weight.shape[0])).copy()
    for dy in range(k):
        for dx in range(k):
            out += pad[dy:dy + H, dx:dx + W] @ weight[:, :, dy, dx].T
    return out


class BilinearTaps:
    """Precomputed bilinear corner indices and weights for fixed pixel positions."""

    def __init__(self, pixels: np.ndarray, H: int, W: int, dtype):
        x = np.clip(np.nan_to_num(pixels[..., 0]), 0, W - 1)
        y = np.clip(np.nan_to_num(pixels[..., 1]), 0, H - 1)
        x0 = np.minimum(np.floor(x), W - 1)
        y0 = np.minimum(np.floor(y), H - 1)
        self.wx = (x - x0).astype(dtype)[..., None]
        self.wy = (y - y0).astype(dtype)[..., None]
        self.x0, self.y0 = x0.astype(int), y0.astype(int)
        self.x1 = np.minimum(self.x0 + 1, W - 1)
        self.y1 = np.minimum(self.y0 + 1, H - 1)

    def __call__(self, image):
        top = image[self.y0, self.x0] * (1 - self.wx) + image[self.y0, self.x1] * self.wx
        bottom = image[self.y1, self.x0] * (1 - self.wx) + image[self.y1, self.x1] * self.wx
        return top * (1 - self.wy) + bottom * self.wy


class ReferenceLoss:
    """Training loss of the attention model on one fixed ray batch, in numpy.

    The geometry (epipolar pixels, validity, encodings) is frozen at
    construction; ``__call__`` takes a name -> array parameter mapping.
    """

    def __init__(self, config, batch, aux_weight: float = 1.0, dtype=np.longdouble):
        if config.variant != "nlf":
            raise ValueError("the reference forward covers the attention model only")
        self.config = config
        self.dtype = dtype
        self.aux_weight = aux_weight
        grid = batch.grid
        B, K, P = grid.valid.shape
        self.shape = (B, K, P)
        self.valid = np.asarray(grid.valid, dtype=bool)
        self.view_ids = np.asarray(grid.view_ids)
        enc = lambda v: np.asarray(fourier_encode(np.asarray(v, dtype=np.float64), config.fourier)).astype(dtype)
        self.target_enc = enc(batch.target_coords)
        self.ray_enc = enc(grid.ray_coords)
        self.point_enc = enc(grid.points3d)
        self.images = [np.asarray(im, dtype=np.float64).astype(dtype) for im in batch.reference_images]
        self.taps = [BilinearTaps(np.asarray(grid.pixels[:, j]), *self.images[j].shape[:2], dtype) for j in range(K)]
        self.colors = np.stack([np.where(self.valid[:, j, :, None], self.taps[j](self.images[j]), 0)
                                for j in range(K)], axis=1)
        self.gt = np.asarray(batch.gt.detach().cpu().numpy(), dtype=np.float64).astype(dtype)

    # The forward pass is a chain of stages; ``stage_of`` names the first
    # stage a parameter touches, so a finite-difference evaluation can resume
    # from cached activations of the unperturbed parameters.

    def stage_of(self, name: str) -> int:
        nb = self.config.num_blocks
        if name.startswith("conv"):
            return 0
        if name.startswith(("embeddings", "point_proj", "target_proj")):
            return 1
        if name.startswith("epipolar.blocks."):
            return 2 + int(name.split(".")[2])
        if name == "w1":
            return 2 + nb
        if name.startswith("view.blocks."):
            return 3 + nb + int(name.split(".")[2])
        return 3 + 2 * nb  # w2, head

    def _stages(self):
        nb = self.config.num_blocks
        return ([self._features, self._tokens] + [self._epipolar_block(i) for i in range(nb)] + [self._pool1]
                + [self._view_block(i) for i in range(nb)] + [self._output])

    def _features(self, p, s):
        K = self.shape[1]
        feats = []
        for j in range(K):
            fmap = conv2d(self.images[j], p["conv.weight"], p["conv.bias"])
            feats.append(np.where(self.valid[:, j, :, None], self.taps[j](fmap), 0))
        s["feats"] = np.stack(feats, axis=1)

    def _tokens(self, p, s):
        B, K, P = self.shape
        D = self.config.model_dim
        cam = p["embeddings.weight"][self.view_ids]  # (K, E)
        raw = np.concatenate([
            self.ray_enc,
            self.point_enc,
            np.broadcast_to(cam[None, :, None, :], (B, K, P, cam.shape[-1])),
            s["feats"],
            self.colors,
        ], axis=-1)
        s["raw"] = raw
        points = linear(raw, p, "point_proj")
        s["target"] = target = linear(self.target_enc, p, "target_proj")
        s["seq"] = np.concatenate([np.broadcast_to(target[:, None, None, :], (B, K, 1, D)), points], axis=2)

    def _scale(self):
        return self.dtype(1) / np.sqrt(self.dtype(self.config.model_dim))

    def _epipolar_block(self, i):
        def run(p, s):
            B, K, _ = self.shape
            mask = np.concatenate([np.ones((B, K, 1), dtype=bool), self.valid], axis=2)
            s["seq"] = block(s["seq"], mask, p, f"epipolar.blocks.{i}", self._scale())
        return run

    def _pool1(self, p, s):
        B = self.shape[0]
        s["z"], s["alpha"], s["view_valid"] = pool(s["seq"][:, :, 1:], p["w1"], self.valid)
        s["seq2"] = np.concatenate([s["target"][:, None, :], s["z"]], axis=1)
        s["mask2"] = np.concatenate([np.ones((B, 1), dtype=bool), s["view_valid"]], axis=1)

    def _view_block(self, i):
        def run(p, s):
            s["seq2"] = block(s["seq2"], s["mask2"], p, f"view.blocks.{i}", self._scale())
        return run

    def _output(self, p, s):
        feature, s["beta"], s["ray_valid"] = pool(s["seq2"][:, 1:], p["w2"], s["view_valid"])
        s["rgb"] = sigmoid(linear(feature, p, "head"))
        s["aux"] = np.einsum("bk,bkc->bc", s["beta"], np.einsum("bkp,bkpc->bkc", s["alpha"], self.colors))

    def forward(self, params: Mapping[str, np.ndarray], start: int = 0, cache: Optional[list] = None):
        """(rgb (B, 3), aux color (B, 3), ray_valid (B,)).

        With ``cache`` (as filled by :meth:`snapshot`) evaluation resumes at
        stage ``start``; earlier stages must not depend on changed parameters.
        """
        p = {k: np.asarray(v).astype(self.dtype, copy=False) for k, v in params.items()}
        s = dict(cache[start]) if cache is not None else {}
        for stage in self._stages()[start:]:
            stage(p, s)
        return s["rgb"], s["aux"], s["ray_valid"]

    def snapshot(self, params: Mapping[str, np.ndarray]) -> list[dict]:
        """Activations entering every stage, for resuming with :meth:`forward`."""
        p = {k: np.asarray(v).astype(self.dtype, copy=False) for k, v in params.items()}
        s: dict = {}
        cache = []
        for stage in self._stages():
            cache.append(dict(s))
            stage(p, s)
        return cache

    def loss_from(self, rgb, aux, keep):
        gt = self.gt[keep]
        loss = np.mean((rgb[keep] - gt) ** 2)
        if self.aux_weight:
            loss = loss + self.dtype(self.aux_weight) * np.mean((aux[keep] - gt) ** 2)
        return loss

    def __call__(self, params: Mapping[str, np.ndarray], start: int = 0, cache: Optional[list] = None):
        return self.loss_from(*self.forward(params, start, cache))


class ZeroBlockExactLoss:
    """Finite differences of the zero-block attention model with rounding noise near 1e-30.

    Without transformer blocks every parameter enters through a stage that is
    affine in it: conv, camera embeddings and the token projection produce the
    point tokens, and w1, w2 and the color head act directly on the pooled
    features. Moving one coordinate by +-h therefore moves that stage's output
    by exactly +-h J, where J is the stage's partial derivative. J is formed
    in long double (its rounding perturbs the difference quotient only at the
    1e-19 relative level, with no 1/h amplification) and the nonlinear tail
    (two masked softmax pools, head, sigmoid, loss) runs in ``mpmath``.
    """

    def __init__(self, ref: ReferenceLoss, params: Mapping[str, np.ndarray], dps: int = 34):
        c = ref.config
        if c.num_blocks != 0:
            raise ValueError("exact differences need a model without transformer blocks")
        self.ref = ref
        self.params = params
        self.ctx = mpmath.mp.clone()
        self.ctx.dps = dps
        cache = ref.snapshot(params)
        s = cache[-1]
        self.raw = s["raw"]
        self.points = s["seq"][:, :, 1:]
        B, K, P = ref.shape
        self.edges = np.cumsum([0, c.ray_dim, c.fourier.out_dim(3), c.embed_dim, c.conv_channels, 3])
        self.to_mp = lambda a: _ld_to_mp(a, self.ctx)
        self.base = self.to_mp(self.points)
        self.colors = self.to_mp(ref.colors)
        self.gt = self.to_mp(ref.gt)
        self._exp = np.frompyfunc(self.ctx.exp, 1, 1)

    def _tail(self, points, w1, w2, head_w, head_b):
        ref, ctx = self.ref, self.ctx
        D = points.shape[-1]
        valid = ref.valid
        logits = points @ w1[D:]
        alpha = self._softmax(logits, valid)
        z = np.einsum("bkp,bkpd->bkd", alpha, points)
        view_valid = valid.any(-1)
        beta = self._softmax(z @ w2[D:], view_valid)
        feature = np.einsum("bk,bkd->bd", beta, z)
        rgb = 1 / (1 + self._exp(-(feature @ head_w.T + head_b)))
        aux = np.einsum("bk,bkc->bc", beta, np.einsum("bkp,bkpc->bkc", alpha, self.colors))
        keep = view_valid.any(-1)
        gt = self.gt[keep]
        total = np.sum((rgb[keep] - gt) ** 2) / gt.size
        if ref.aux_weight:
            total = total + ctx.mpf(ref.aux_weight) * np.sum((aux[keep] - gt) ** 2) / gt.size
        return total

    def _softmax(self, logits, mask):
        ctx = self.ctx
        out = np.empty(logits.shape, dtype=object)
        flat_l = logits.reshape(-1, logits.shape[-1])
        flat_m = mask.reshape(-1, mask.shape[-1])
        rows = []
        for l, m in zip(flat_l, flat_m):
            if not m.any():
                rows.append([ctx.mpf(0)] * len(l))
                continue
            top = max(v for v, ok in zip(l, m) if ok)
            e = [ctx.exp(v - top) if ok else ctx.mpf(0) for v, ok in zip(l, m)]
            tot = ctx.fsum(e)
            rows.append([v / tot for v in e])
        out[...] = np.array(rows, dtype=object).reshape(logits.shape)
        return out

    def _tangent(self, name: str, idx: int):
        """d(point tokens)/d(coordinate) for stage-0/1 parameters, or None if tokens do not move."""
        ref, p = self.ref, self.params
        B, K, P = ref.shape
        W = p["point_proj.weight"]
        e = self.edges
        J = np.zeros(self.points.shape, dtype=np.longdouble)
        if name == "point_proj.weight":
            r, col = np.unravel_index(idx, W.shape)
            J[..., r] = self.raw[..., col]
        elif name == "point_proj.bias":
            J[..., idx] = 1
        elif name == "embeddings.weight":
            v, k = np.unravel_index(idx, p[name].shape)
            hit = ref.view_ids == v
            J[:, hit] = W[:, e[2] + k]
        elif name in ("conv.weight", "conv.bias"):
            if name == "conv.weight":
                o, ci, dy, dx = np.unravel_index(idx, p[name].shape)
            else:
                o, ci = idx, None
            for j in range(K):
                img = ref.images[j]
                H, Wd = img.shape[:2]
                if ci is None:
                    dmap = np.ones((H, Wd), dtype=np.longdouble)
                else:
                    r = p["conv.weight"].shape[-1] // 2
                    pad = np.zeros((H + 2 * r, Wd + 2 * r), dtype=np.longdouble)
                    pad[r:r + H, r:r + Wd] = img[..., ci]
                    dmap = pad[dy:dy + H, dx:dx + Wd]
                dfeat = np.where(ref.valid[:, j], ref.taps[j](dmap[..., None])[..., 0], 0)
                J[:, j] = dfeat[..., None] * W[:, e[3] + o]
        else:
            return None
        return J

    def difference(self, name: str, idx: int, h: float) -> float:
        """(loss(theta + h e_idx) - loss(theta - h e_idx)) / 2h for one parameter coordinate."""
        ctx, p = self.ctx, self.params
        hm = ctx.mpf(np.float64(h))
        args = {k: self.to_mp(p[k]) for k in ("w1", "w2", "head.weight", "head.bias")}
        if name in args:
            flat = args[name].reshape(-1)
            orig = flat[idx]
            flat[idx] = orig + hm
            plus = self._tail(self.base, args["w1"], args["w2"], args["head.weight"], args["head.bias"])
            flat[idx] = orig - hm
            minus = self._tail(self.base, args["w1"], args["w2"], args["head.weight"], args["head.bias"])
        else:
            J = self._tangent(name, idx)
            if J is None or not np.any(J):
                return 0.0
            step = self.to_mp(J) * hm
            plus = self._tail(self.base + step, args["w1"], args["w2"], args["head.weight"], args["head.bias"])
            minus = self._tail(self.base - step, args["w1"], args["w2"], args["head.weight"], args["head.bias"])
        return float((plus - minus) / (2 * hm))


def _ld_to_mp(a: np.ndarray, ctx) -> np.ndarray:
    """Exact conversion of a float64 / long double array to mpmath numbers."""
    a = np.asarray(a)
    out = np.empty(a.shape, dtype=object)
    flat = out.reshape(-1)
    for i, v in enumerate(a.reshape(-1)):
        if a.dtype == np.longdouble:
            # split into two float64 pieces; hi + lo is exact for a 64-bit mantissa
            hi = np.float64(v)
            lo = np.float64(v - np.longdouble(hi))
            flat[i] = ctx.mpf(float(hi)) + ctx.mpf(float(lo))
        else:
            flat[i] = ctx.mpf(float(v))
    return out


def model_parameters(model, dtype=np.longdouble) -> dict[str, np.ndarray]:
    """Copy of every named parameter of ``model`` as a numpy array of ``dtype``."""
    return {n: p.detach().cpu().double().numpy().astype(dtype) for n, p in model.named_parameters()}


def reference_loss(model, batch, aux_weight: float = 1.0, dtype=np.longdouble,
                   params: Optional[Mapping[str, np.ndarray]] = None):
    """One-shot convenience wrapper: loss of ``model`` on ``batch`` in numpy."""
    ref = ReferenceLoss(model.config, batch, aux_weight, dtype)
    return ref(params if params is not None else model_parameters(model, dtype))
