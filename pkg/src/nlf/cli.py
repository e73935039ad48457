"""Command-line entry points: ``nlf <subcommand> ...``.

Every subcommand exits 0 on success. Failures print one JSON object
``{"error": <type>, "message": <text>}`` on stderr and exit 1 (2 for usage
errors, as argparse does).
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, NLFError
from .geometry import CameraModel
from .metrics import EvalReport, psnr, ssim
from .model import ModelConfig, NeuralLightField
from .render import (
    EpiRequest,
    RenderRequest,
    disparity_map,
    epi_slice,
    render_image,
    view_attention_image,
)
from .sampler import SamplerConfig
from .scene import (
    SyntheticSceneSpec,
    generate_synthetic,
    linear_to_srgb,
    load_checkpoint,
    load_scene,
    read_archive,
    save_checkpoint,
    save_png,
    save_scene,
)
from .train import TrainConfig, Trainer, grad_check, make_batch

log = logging.getLogger("nlf")


def _seed_everything(seed: int, deterministic: bool) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _sampler_from(d: Optional[dict]) -> SamplerConfig:
    d = dict(d or {})
    d.pop("training_mode", None)
    return SamplerConfig(**d)


def _load_model(ckpt_path):
    model, _ = load_checkpoint(ckpt_path)
    model.eval()
    extra = read_archive(ckpt_path).extra
    return model, _sampler_from(extra.get("sampler"))


def _camera(scene, spec: str) -> CameraModel:
    """A view id of the scene or a JSON pose file with intrinsics/rotation/translation/image_size."""
    if spec.lstrip("-").isdigit():
        return scene.camera(int(spec))
    d = _read_json(spec)
    try:
        return CameraModel(d["intrinsics"], d["rotation"], d["translation"], tuple(d["image_size"]),
                           int(d.get("view_id", -1)))
    except KeyError as exc:
        raise ConfigError(f"{spec}: pose file lacks {exc}") from None


def _write_image(path, linear) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_png(path, linear)


def _write_gray(path, values) -> None:
    rgb = np.repeat(np.clip(values, 0, 1)[..., None], 3, axis=-1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> None:
    d = _read_json(args.spec)
    d["seed"] = args.seed if args.seed is not None else d.get("seed", 0)
    scene = generate_synthetic(SyntheticSceneSpec.from_dict(d))
    path = save_scene(scene, args.out_dir)
    print(json.dumps({"manifest": str(path), "views": len(scene.cameras),
                      "train": list(scene.train_ids), "test": list(scene.test_ids)}))


def cmd_train(args) -> None:
    scene = load_scene(args.scene)
    cfg = _read_json(args.config)
    model_d = dict(cfg.get("model", {}))
    model_d.setdefault("num_views", len(scene.train_ids))
    model_d.setdefault("parametrization", scene.parametrization)
    mcfg = ModelConfig.from_dict(model_d)
    if mcfg.parametrization != scene.parametrization:
        raise ConfigError(f"model parametrization {mcfg.parametrization} does not match scene {scene.parametrization}")
    train_d = dict(cfg.get("train", {}))
    if args.seed is not None:
        train_d["seed"] = args.seed
    if args.steps is not None:
        train_d["total_steps"] = args.steps
    tcfg = TrainConfig(**train_d)
    sampler = _sampler_from(cfg.get("sampler"))
    torch.manual_seed(tcfg.seed)
    opt_state = None
    if args.resume:
        model, opt_state = load_checkpoint(args.resume)
    else:
        model = NeuralLightField(mcfg)
    trainer = Trainer(model, scene, tcfg, sampler, opt_state, metrics_path=args.metrics)
    trainer.run()
    extra = {"sampler": {"K": sampler.K, "N": sampler.N, "P": sampler.P, "depth_spacing": sampler.depth_spacing},
             "train": tcfg.to_dict()}
    save_checkpoint(model, trainer.opt_state, args.ckpt_out, extra=extra)
    print(json.dumps({"checkpoint": str(args.ckpt_out), "steps": trainer.opt_state.step,
                      "final_loss": trainer.history[-1] if trainer.history else None}))


def cmd_render(args) -> None:
    model, sampler = _load_model(args.ckpt)
    scene = load_scene(args.scene)
    cam = _camera(scene, args.camera)
    outputs = tuple(o for o in args.outputs.split(",") if o)
    with torch.no_grad():
        out = render_image(model, scene, RenderRequest(cam, args.block_size, outputs), sampler)
    _write_image(args.out, out["color_debug"] if args.debug else out["color"])
    stem = Path(args.out).with_suffix("")
    for key in ("depth", "disparity", "beta", "alpha"):
        if key in out and key in outputs:
            np.save(f"{stem}_{key}.npy", out[key])
    print(json.dumps({"image": str(args.out), "flagged_pixels": int(out["flagged"].sum()),
                      "reference_ids": out["reference_ids"].tolist()}))


def cmd_eval(args) -> None:
    model, sampler = _load_model(args.ckpt)
    scene = load_scene(args.scene)
    ids = scene.test_ids if args.split == "test" else scene.train_ids
    lpips = _read_json(args.lpips) if args.lpips else {}
    report = EvalReport()
    for vid in ids:
        with torch.no_grad():
            out = render_image(model, scene, RenderRequest(scene.camera(vid), args.block_size), sampler)
        pred, gt = linear_to_srgb(out["color"]), linear_to_srgb(scene.images[vid])
        lp = lpips.get(str(vid))
        report.add(f"{vid:03d}", psnr(pred, gt), ssim(pred, gt), None if lp is None else float(lp))
        if args.save_images:
            _write_image(Path(args.save_images) / f"{vid:03d}.png", out["color"])
    text = report.to_text()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    sys.stdout.write(text)


def _parse_assignments(text: str) -> dict[str, str]:
    out = {}
    for part in text.split(","):
        if "=" not in part:
            raise ConfigError(f"expected name=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def cmd_epi(args) -> None:
    model, sampler = _load_model(args.ckpt)
    scene = load_scene(args.scene)
    fixed = {k: float(v) for k, v in _parse_assignments(args.fixed).items()}
    ranges = _parse_assignments(args.range)
    if len(ranges) != 2:
        raise ConfigError("--range needs exactly two coordinates, e.g. s=-1:1,u=-1:1")
    names = tuple(ranges)
    spans = []
    for n in names:
        lo, hi = ranges[n].split(":")
        spans.append((float(lo), float(hi)))
    rows, cols = (int(v) for v in args.resolution.lower().split("x"))
    request = EpiRequest(fixed, names, tuple(spans), (rows, cols), args.relative)
    with torch.no_grad():
        out = epi_slice(model, scene, request, sampler)
    _write_image(args.out, out["image"])
    print(json.dumps({"image": str(args.out), "flagged": int(out["flagged"].sum())}))


def cmd_disparity(args) -> None:
    model, sampler = _load_model(args.ckpt)
    scene = load_scene(args.scene)
    cam = _camera(scene, args.camera)
    with torch.no_grad():
        out = disparity_map(model, scene, cam, sampler, args.block_size)
    _write_gray(args.out, out["preview"])
    np.save(Path(args.out).with_suffix(".npy"), out["disparity"])
    print(json.dumps({"image": str(args.out), "flagged_pixels": int(out["flagged"].sum())}))


def cmd_attention(args) -> None:
    model, sampler = _load_model(args.ckpt)
    scene = load_scene(args.scene)
    cam = _camera(scene, args.camera)
    with torch.no_grad():
        beta = view_attention_image(model, scene, cam, sampler, args.block_size)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    Image.fromarray(np.round(np.clip(beta, 0, 1) * 255).astype(np.uint8)).save(args.out)
    print(json.dumps({"image": str(args.out)}))


def cmd_gradcheck(args) -> None:
    """Build the configured tiny model on a small synthetic scene and compare gradients."""
    cfg = _read_json(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    torch.manual_seed(seed)
    model_d = dict(cfg.get("model", {}))
    scene_d = cfg.get("scene") or {
        "primitives": [{"type": "plane", "depth": 3.0, "texture": "noise", "period": 0.1}],
        "rig": {"kind": "line", "count": 3, "baseline": 0.3, "image_size": [16, 16], "focal": 16},
        "near": 1.5, "far": 5.0,
    }
    scene = generate_synthetic(SyntheticSceneSpec.from_dict(dict(scene_d, seed=seed)))
    model_d.setdefault("num_views", len(scene.train_ids))
    model = NeuralLightField(ModelConfig.from_dict(model_d))
    if cfg.get("dtype", "float64") == "float64":
        model = model.double()
    sampler = _sampler_from(cfg.get("sampler", {"K": 2, "P": 4}))
    rng = np.random.default_rng(seed)
    target = int(cfg.get("target_view", 1))
    cam = scene.camera(target)
    n = int(cfg.get("rays", 8))
    pixels = np.stack([rng.integers(0, cam.width, n), rng.integers(0, cam.height, n)], -1).astype(np.float64)
    batch = make_batch(model, scene, target, pixels, sampler, rng)
    corrupt = cfg.get("corrupt")
    result = grad_check(
        model, batch,
        aux_weight=float(cfg.get("aux_weight", 1.0)),
        samples_per_group=int(cfg.get("samples_per_group", 200)),
        h=float(cfg.get("h", 1e-5)),
        seed=seed,
        corrupt=tuple(corrupt) if corrupt else None,
        oracle=cfg.get("oracle", "auto"),
        details=True,
    )
    tol = float(cfg.get("tolerance", 1e-6))
    result["tolerance"] = tol
    result["passed"] = result["max_rel_error"] < tol
    print(json.dumps(result, indent=2))
    if not result["passed"] and not corrupt:
        raise NLFError(f"max relative error {result['max_rel_error']:.3e} exceeds {tol:g}")


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random choice")
    common.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nlf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate an analytic synthetic scene")
    s.add_argument("spec", help="JSON scene spec")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model on one scene")
    s.add_argument("scene")
    s.add_argument("config", help="JSON with optional 'model', 'train' and 'sampler' sections")
    s.add_argument("ckpt_out")
    s.add_argument("--steps", type=int, default=None, help="override train.total_steps")
    s.add_argument("--metrics", default=None, help="append step/loss/lr/time rows to this file")
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    def renderer(name, func, help_text, camera=True):
        s = sub.add_parser(name, parents=[common], help=help_text)
        s.add_argument("ckpt")
        s.add_argument("scene")
        if camera:
            s.add_argument("--camera", required=True, help="view id or JSON pose file")
        s.add_argument("--block-size", type=int, default=4096)
        s.set_defaults(func=func)
        return s

    s = renderer("render", cmd_render, "render an image")
    s.add_argument("--out", required=True)
    s.add_argument("--outputs", default="color", help="comma list of color,depth,disparity,beta,alpha")
    s.add_argument("--debug", action="store_true", help="paint rays no reference view sees in magenta")

    s = renderer("eval", cmd_eval, "PSNR/SSIM report over a split", camera=False)
    s.add_argument("--split", choices=("test", "train"), default="test")
    s.add_argument("--report", default=None, help="write the table here as well as to stdout")
    s.add_argument("--lpips", default=None, help="JSON mapping view id -> externally computed LPIPS")
    s.add_argument("--save-images", default=None, help="directory for the rendered images")

    s = renderer("epi", cmd_epi, "epipolar-plane image over slab coordinates", camera=False)
    s.add_argument("--fixed", required=True, help="two fixed coordinates, e.g. t=0,v=0")
    s.add_argument("--range", required=True, help="row and column coordinate ranges, e.g. s=-0.5:0.5,u=-1:1")
    s.add_argument("--resolution", default="128x128", help="ROWSxCOLS")
    s.add_argument("--relative", action="store_true", help="column coordinate is an offset from the row one")
    s.add_argument("--out", required=True)

    s = renderer("disparity", cmd_disparity, "attention-weighted disparity map")
    s.add_argument("--out", required=True)

    s = renderer("attention", cmd_attention, "view-attention weights as RGB (needs K=3)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("gradcheck", parents=[common], help="autograd vs finite differences on a tiny model")
    s.add_argument("config", help="JSON with 'model' and optional 'sampler', 'rays', 'corrupt', 'tolerance'")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    _seed_everything(args.seed if args.seed is not None else 0, args.deterministic)
    try:
        args.func(args)
    except (NLFError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
