"""Scenes on disk, analytic synthetic scenes and checkpoint archives."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    CorruptArchive,
    InvalidCamera,
    InvalidPose,
    InvalidSpec,
    MissingImage,
    ParseError,
    TensorShapeMismatch,
    VersionMismatch,
)
from .geometry import CameraModel, SceneFrame, ray_from_pixel

MANIFEST_FORMAT = "nlf-scene"
MANIFEST_VERSION = 1


# -- color space ---------------------------------------------------------------


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def to_uint8(linear) -> np.ndarray:
    return np.round(linear_to_srgb(linear) * 255.0).astype(np.uint8)


def from_uint8(data) -> np.ndarray:
    return srgb_to_linear(np.asarray(data, dtype=np.float64) / 255.0)


def quantize(linear) -> np.ndarray:
    """Snap linear colors onto the values an 8-bit sRGB file can store."""
    return from_uint8(to_uint8(linear))


def save_png(path, linear) -> None:
    Image.fromarray(to_uint8(linear)).save(path)


# -- scenes --------------------------------------------------------------------


@dataclass
class Scene:
    frame: SceneFrame
    cameras: list[CameraModel]  # cameras[i].view_id == i
    images: list[np.ndarray]  # linear float64 (H, W, 3)
    train_ids: list[int]
    test_ids: list[int]
    depths: Optional[list[np.ndarray]] = None  # camera-space z per pixel; inf where nothing is hit
    name: str = "scene"

    @property
    def parametrization(self) -> str:
        return self.frame.parametrization

    @property
    def train_cameras(self) -> list[CameraModel]:
        return [self.cameras[i] for i in self.train_ids]

    def camera(self, view_id: int) -> CameraModel:
        return self.cameras[view_id]


def validate_scene(scene: Scene) -> None:
    for i, cam in enumerate(scene.cameras):
        if cam.view_id != i:
            raise InvalidPose(cam.view_id, f"cameras must be listed in view_id order (position {i})")
        try:
            cam.validate()
        except InvalidCamera as exc:
            raise InvalidPose(cam.view_id, str(exc)) from None
        h, w = scene.images[i].shape[:2]
        if (w, h) != cam.image_size:
            raise InvalidPose(cam.view_id, f"image is {w}x{h}, camera declares {cam.image_size}")
    if set(scene.train_ids) & set(scene.test_ids):
        raise ParseError("train and test splits overlap")
    if sorted(scene.train_ids) != list(range(len(scene.train_ids))):
        raise ParseError("training views must use view ids 0..n_train-1 (they index the embedding table)")


def _frame_dict(frame: SceneFrame) -> dict:
    return {
        "z_st": frame.z_st,
        "z_uv": frame.z_uv,
        "sphere_center": list(frame.sphere_center),
        "sphere_radius": frame.sphere_radius,
        "near": frame.near,
        "far": frame.far,
        "scale": frame.scale,
    }


def save_scene(scene: Scene, out_dir) -> Path:
    """Write images as sRGB PNGs (plus depth maps if present) and ``scene.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for cam, img in zip(scene.cameras, scene.images):
        rel = f"images/{cam.view_id:03d}.png"
        save_png(out / rel, img)
        rec = {
            "view_id": cam.view_id,
            "image": rel,
            "image_size": list(cam.image_size),
            "intrinsics": cam.intrinsics.tolist(),
            "rotation": cam.rotation.tolist(),
            "translation": cam.translation.tolist(),
        }
        if scene.depths is not None:
            (out / "depth").mkdir(exist_ok=True)
            rec["depth"] = f"depth/{cam.view_id:03d}.npy"
            np.save(out / rec["depth"], scene.depths[cam.view_id])
        records.append(rec)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": scene.name,
        "parametrization": scene.parametrization,
        "frame": _frame_dict(scene.frame),
        "cameras": records,
        "splits": {"train": list(scene.train_ids), "test": list(scene.test_ids)},
    }
    path = out / "scene.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_scene(path) -> Scene:
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from None
    root = path.parent
    try:
        if manifest.get("format") != MANIFEST_FORMAT:
            raise ParseError(f"{path}: not a scene manifest")
        if manifest.get("version") != MANIFEST_VERSION:
            raise ParseError(f"{path}: unsupported manifest version {manifest.get('version')}")
        f = manifest["frame"]
        frame = SceneFrame(
            z_st=float(f["z_st"]),
            z_uv=float(f["z_uv"]),
            sphere_center=tuple(f.get("sphere_center", (0.0, 0.0, 0.0))),
            sphere_radius=float(f.get("sphere_radius", 1.0)),
            near=float(f["near"]),
            far=float(f["far"]),
            parametrization=manifest["parametrization"],
            scale=float(f.get("scale", 1.0)),
        )
        records = sorted(manifest["cameras"], key=lambda r: r["view_id"])
        splits = manifest["splits"]
        train_ids, test_ids = [int(i) for i in splits["train"]], [int(i) for i in splits.get("test", [])]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{path}: malformed manifest ({exc!r})") from None

    cameras, images, depths = [], [], []
    for rec in records:
        vid = int(rec["view_id"])
        try:
            cam = CameraModel(rec["intrinsics"], rec["rotation"], rec["translation"], tuple(rec["image_size"]), vid)
        except (KeyError, ValueError) as exc:
            raise ParseError(f"{path}: camera {vid}: {exc!r}") from None
        try:
            cam.validate()
        except InvalidCamera as exc:
            raise InvalidPose(vid, str(exc)) from None
        img_path = root / rec["image"]
        if not img_path.exists():
            raise MissingImage(f"view {vid}: {img_path} not found")
        with Image.open(img_path) as im:
            images.append(from_uint8(np.asarray(im.convert("RGB"))))
        if "depth" in rec:
            depths.append(np.load(root / rec["depth"]))
        cameras.append(cam)
    scene = Scene(
        frame, cameras, images, train_ids, test_ids,
        depths if len(depths) == len(cameras) else None, manifest.get("name", "scene"),
    )
    validate_scene(scene)
    return scene


# -- synthetic scenes ----------------------------------------------------------


@dataclass
class SyntheticSceneSpec:
    """Analytic scene description.

    Primitives (dicts):
      ``{"type": "plane", "depth": z, "texture": "checker"|"noise", "period": p,
         "albedo": [[r,g,b],[r,g,b]], "extent": [xmin, xmax, ymin, ymax] (optional)}``
      ``{"type": "sphere", "center": [x,y,z], "radius": r, "albedo": [r,g,b],
         "specular": 0.0, "shininess": 32}``
    Rig (dict): ``kind`` in line | grid | arc | hemisphere, plus ``count``,
    ``image_size``, ``focal`` and kind-specific fields (``baseline``,
    ``rows``/``cols``, ``radius``, ``look_at``, ``span``).
    """

    primitives: list[dict]
    rig: dict
    near: float
    far: float
    parametrization: str = "slab"
    holdout: Sequence[int] = ()  # rig positions reserved for the test split
    light_dir: Sequence[float] = (0.3, -0.5, 1.0)  # direction the light travels
    ambient: float = 0.3
    background: Sequence[float] = (0.2, 0.2, 0.2)
    samples_per_pixel: int = 1  # per axis; >1 supersamples to reduce aliasing
    sphere_center: Sequence[float] = (0.0, 0.0, 0.0)
    sphere_radius: float = 1.0
    seed: int = 0
    name: str = "synthetic"

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None


def _rig_cameras(rig: dict) -> list[CameraModel]:
    kind = rig.get("kind", "line")
    size = tuple(rig.get("image_size", (32, 32)))
    focal = float(rig.get("focal", size[0]))
    count = int(rig.get("count", 2))
    cams = []
    if kind == "line":
        b = float(rig.get("baseline", 0.1))
        xs = (np.arange(count) - (count - 1) / 2.0) * b
        for x in xs:
            cams.append(CameraModel.from_focal(focal, size, np.eye(3), -np.array([x, 0.0, 0.0])))
    elif kind == "grid":
        rows, cols = int(rig.get("rows", 2)), int(rig.get("cols", 2))
        b = float(rig.get("baseline", 0.1))
        for r in range(rows):
            for c in range(cols):
                center = np.array([(c - (cols - 1) / 2.0) * b, (r - (rows - 1) / 2.0) * b, 0.0])
                cams.append(CameraModel.from_focal(focal, size, np.eye(3), -center))
    elif kind in ("arc", "hemisphere"):
        radius = float(rig.get("radius", 4.0))
        target = np.asarray(rig.get("look_at", (0.0, 0.0, 0.0)), dtype=np.float64)
        span = float(rig.get("span", np.pi / 3))
        if kind == "arc":
            angles = np.linspace(-span / 2, span / 2, count)
            centers = [target + radius * np.array([np.sin(a), 0.0, -np.cos(a)]) for a in angles]
        else:
            # Fibonacci spiral over the hemisphere z < target.z
            i = np.arange(count) + 0.5
            cz = 1.0 - i / count
            r_xy = np.sqrt(1.0 - cz**2)
            phi = np.pi * (3.0 - np.sqrt(5.0)) * i
            centers = [target + radius * np.array([r_xy[k] * np.cos(phi[k]), r_xy[k] * np.sin(phi[k]), -cz[k]])
                       for k in range(count)]
        for c in centers:
            fwd = target - c
            up = np.array([0.0, -1.0, 0.0]) if abs(fwd[1]) < 0.9 * np.linalg.norm(fwd) else np.array([1.0, 0.0, 0.0])
            cams.append(CameraModel.look_at(c, target, up, focal, size))
    else:
        raise InvalidSpec(f"unknown rig kind {kind!r}")
    return cams


def _value_noise(seed, period, x, y):
    """Smooth tileable-free value noise on a lattice of spacing ``period``."""
    rng = np.random.default_rng(seed)
    lattice = rng.random((257, 257))
    gx, gy = x / period, y / period
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    ix, iy = x0.astype(np.int64) % 256, y0.astype(np.int64) % 256
    v00, v10 = lattice[iy, ix], lattice[iy, ix + 1]
    v01, v11 = lattice[iy + 1, ix], lattice[iy + 1, ix + 1]
    return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy


def _plane_color(prim, idx, hit, seed):
    albedo = np.asarray(prim.get("albedo", [[0.9, 0.9, 0.9], [0.1, 0.1, 0.1]]), dtype=np.float64)
    period = float(prim.get("period", 0.1))
    x, y = hit[..., 0], hit[..., 1]
    if prim.get("texture", "checker") == "noise":
        w = _value_noise(seed + 7919 * idx, period, x, y)[..., None]
        return albedo[0] * (1 - w) + albedo[1] * w
    parity = (np.floor(x / period) + np.floor(y / period)) % 2
    return np.where(parity[..., None] == 0, albedo[0], albedo[1])


def _trace(spec: SyntheticSceneSpec, origins, dirs):
    """Closest-hit shading for rays (N, 3); returns colors (N, 3) and hit deltas (N,)."""
    n = origins.shape[0]
    best = np.full(n, np.inf)
    color = np.tile(np.asarray(spec.background, dtype=np.float64), (n, 1))
    light = -np.asarray(spec.light_dir, dtype=np.float64)
    light /= np.linalg.norm(light)
    for idx, prim in enumerate(spec.primitives):
        kind = prim.get("type")
        if kind == "plane":
            z = float(prim["depth"])
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (z - origins[:, 2]) / dirs[:, 2]
            hit = origins + t[:, None] * dirs
            ok = np.isfinite(t) & (t > 0)
            if "extent" in prim:
                x0, x1, y0, y1 = prim["extent"]
                ok &= (hit[:, 0] >= x0) & (hit[:, 0] < x1) & (hit[:, 1] >= y0) & (hit[:, 1] < y1)
            ok &= t < best
            if np.any(ok):
                color[ok] = _plane_color(prim, idx, hit[ok], spec.seed)
                best[ok] = t[ok]
        elif kind == "sphere":
            c = np.asarray(prim["center"], dtype=np.float64)
            r = float(prim["radius"])
            oc = origins - c
            a = np.sum(dirs * dirs, -1)
            hb = np.sum(oc * dirs, -1)
            disc = hb * hb - a * (np.sum(oc * oc, -1) - r * r)
            with np.errstate(invalid="ignore"):
                t = (-hb - np.sqrt(disc)) / a
            ok = (disc > 0) & (t > 0) & (t < best)
            if np.any(ok):
                p = origins[ok] + t[ok, None] * dirs[ok]
                normal = (p - c) / r
                albedo = np.asarray(prim.get("albedo", [0.8, 0.3, 0.3]), dtype=np.float64)
                lam = np.clip(normal @ light, 0.0, None)[:, None]
                shade = albedo * (spec.ambient + (1 - spec.ambient) * lam)
                ks = float(prim.get("specular", 0.0))
                if ks > 0:
                    view = -dirs[ok] / np.linalg.norm(dirs[ok], axis=-1, keepdims=True)
                    refl = 2 * (normal @ light)[:, None] * normal - light
                    spec_term = np.clip(np.sum(refl * view, -1), 0.0, None) ** float(prim.get("shininess", 32))
                    shade = shade + ks * spec_term[:, None]
                color[ok] = shade
                best[ok] = t[ok]
        else:
            raise InvalidSpec(f"unknown primitive type {kind!r}")
    return np.clip(color, 0.0, 1.0), best


def render_view(spec: SyntheticSceneSpec, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Analytic image (linear, unquantized) and camera-space depth for one camera."""
    w, h = camera.image_size
    s = max(1, int(spec.samples_per_pixel))
    offsets = (np.arange(s) + 0.5) / s - 0.5
    acc = np.zeros((h * w, 3))
    base = camera.pixel_grid().reshape(-1, 2)
    for oy in offsets:
        for ox in offsets:
            ray = ray_from_pixel(camera, base + np.array([ox, oy]))
            col, _ = _trace(spec, ray.origin, ray.direction)
            acc += col
    ray = ray_from_pixel(camera, base)
    _, t = _trace(spec, ray.origin, ray.direction)
    # the ray direction's camera-space z is exactly 1, so delta is depth
    return (acc / (s * s)).reshape(h, w, 3), t.reshape(h, w)


def generate_synthetic(spec: SyntheticSceneSpec) -> Scene:
    if not spec.primitives:
        raise InvalidSpec("scene needs at least one primitive")
    if not 0 < spec.near < spec.far:
        raise InvalidSpec("need 0 < near < far")
    for prim in spec.primitives:
        if prim.get("type") == "plane" and not spec.near <= float(prim["depth"]) <= spec.far:
            raise InvalidSpec(f"plane at depth {prim['depth']} lies outside [near, far]")
    cams = _rig_cameras(spec.rig)
    holdout = sorted(set(int(i) for i in spec.holdout))
    if any(i < 0 or i >= len(cams) for i in holdout):
        raise InvalidSpec("holdout index outside the rig")
    order = [i for i in range(len(cams)) if i not in holdout] + holdout
    cameras, images, depths = [], [], []
    for new_id, rig_idx in enumerate(order):
        c = cams[rig_idx]
        cam = CameraModel(c.intrinsics, c.rotation, c.translation, c.image_size, new_id)
        img, depth = render_view(spec, cam)
        cameras.append(cam)
        images.append(quantize(img))
        depths.append(depth)
    n_train = len(cams) - len(holdout)
    frame = SceneFrame(
        z_st=spec.near,
        z_uv=spec.far,
        sphere_center=tuple(spec.sphere_center),
        sphere_radius=spec.sphere_radius,
        near=spec.near,
        far=spec.far,
        parametrization=spec.parametrization,
    )
    return Scene(frame, cameras, images, list(range(n_train)), list(range(n_train, len(cams))), depths, spec.name)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"NLFCKPT\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")  # magic, version, json length
_DIGEST = 32


@dataclass
class Checkpoint:
    model_config: dict
    tensors: dict[str, np.ndarray]  # float32
    step: int = 0
    opt_state: Optional[dict[str, np.ndarray]] = None
    extra: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def write_archive(ckpt: Checkpoint, path) -> None:
    payload = io.BytesIO()
    entries = []
    offset = 0
    named = list(ckpt.tensors.items())
    if ckpt.opt_state:
        named += [("optimizer/" + k, v) for k, v in ckpt.opt_state.items()]
    for name, arr in named:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        payload.write(data)
        offset += len(data)
    header = json.dumps({
        "model_config": ckpt.model_config,
        "step": ckpt.step,
        "extra": ckpt.extra,
        "tensors": entries,
    }).encode()
    body = _HEADER.pack(CHECKPOINT_MAGIC, ckpt.version, len(header)) + header + payload.getvalue()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def read_archive(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + _DIGEST:
        raise CorruptArchive(f"{path}: file too short")
    magic, version, hlen = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CorruptArchive(f"{path}: not a checkpoint archive")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{path}: archive version {version}, this build reads version {CHECKPOINT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptArchive(f"{path}: checksum mismatch (truncated or modified)")
    header = json.loads(body[_HEADER.size:_HEADER.size + hlen])
    data = body[_HEADER.size + hlen:]
    tensors, opt = {}, {}
    for e in header["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"]).reshape(e["shape"]).copy()
        if e["name"].startswith("optimizer/"):
            opt[e["name"][len("optimizer/"):]] = arr
        else:
            tensors[e["name"]] = arr
    return Checkpoint(header["model_config"], tensors, header["step"], opt or None, header.get("extra", {}), version)


def save_checkpoint(model, opt_state, path, step: Optional[int] = None, extra: Optional[dict] = None) -> None:
    """Serialize model parameters (and optionally Adam moments) as float32."""
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    opt = None
    if opt_state is not None:
        opt = {f"m/{k}": v.detach().cpu().numpy() for k, v in opt_state.m.items()}
        opt.update({f"v/{k}": v.detach().cpu().numpy() for k, v in opt_state.v.items()})
        if step is None:
            step = opt_state.step
    write_archive(Checkpoint(model.config.to_dict(), tensors, int(step or 0), opt, extra or {}), path)


def load_checkpoint(path, model=None):
    """Restore (model, opt_state). Builds the model from the stored config unless one is given."""
    import torch

    from .model import ModelConfig, NeuralLightField
    from .train import OptState

    ckpt = read_archive(path)
    if model is None:
        model = NeuralLightField(ModelConfig.from_dict(ckpt.model_config))
    state = model.state_dict()
    for name, ref in state.items():
        if name not in ckpt.tensors:
            raise TensorShapeMismatch(name, ref.shape, ())
        if tuple(ckpt.tensors[name].shape) != tuple(ref.shape):
            raise TensorShapeMismatch(name, ref.shape, ckpt.tensors[name].shape)
    extra = set(ckpt.tensors) - set(state)
    if extra:
        name = sorted(extra)[0]
        raise TensorShapeMismatch(name, (), ckpt.tensors[name].shape)
    model.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in ckpt.tensors.items()})
    opt_state = None
    if ckpt.opt_state is not None:
        opt_state = OptState(
            m={k[2:]: torch.from_numpy(v) for k, v in ckpt.opt_state.items() if k.startswith("m/")},
            v={k[2:]: torch.from_numpy(v) for k, v in ckpt.opt_state.items() if k.startswith("v/")},
            step=ckpt.step,
        )
    return model, opt_state
