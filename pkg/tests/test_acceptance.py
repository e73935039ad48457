"""Acceptance criteria 1-7, each at its stated tolerance.

Every test prints one ``[acceptance N] PASS|FAIL ...`` line straight to the
terminal (also under output capture). Images are compared in the stored
8-bit sRGB domain.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from scipy.ndimage import binary_erosion, gaussian_filter

from nlf.geometry import (
    SceneFrame, plucker_coords, point_at, project_points, ray_from_pixel, slab_coords, slab_to_ray, sphere_coords,
)
from nlf.metrics import avg_metric, psnr
from nlf.model import ModelConfig, NeuralLightField
from nlf.render import EpiRequest, RayRenderer, RenderRequest, correspondence_map, epi_slice, reference_views_for, render_image
from nlf.sampler import SamplerConfig, sample_epipolar_points
from nlf.scene import SyntheticSceneSpec, _trace, generate_synthetic, linear_to_srgb, load_checkpoint, save_checkpoint
from nlf.train import OptState, TrainConfig, Trainer, grad_check, make_batch, train_step

from conftest import coincident_rays, fundamental_matrix, random_camera, random_grid, tiny_model


@pytest.fixture
def report(capsys):
    def emit(n, ok, text):
        with capsys.disabled():
            print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'} {text}", flush=True)
    return emit


def srgb_psnr(a, b):
    return psnr(linear_to_srgb(a), linear_to_srgb(b))


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_metric_fidelity(report):
    rows = [((28.26, 0.920, 0.062), 0.0297), ((27.26, 0.904, 0.178), 0.0473)]
    got = [avg_metric(*args) for args, _ in rows]
    errs = [abs(g - want) for g, (_, want) in zip(got, rows)]
    ok = all(e <= 5e-4 for e in errs)
    report(1, ok, f"avg metric {got[0]:.5f} vs 0.0297, {got[1]:.5f} vs 0.0473 (max |err| {max(errs):.1e}, tol 5e-4)")
    assert ok


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_2_geometry_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 10_000
    frame = SceneFrame(z_st=1.0, z_uv=3.0, near=1.0, far=6.0)
    sphere = SceneFrame(1.0, 3.0, (0.0, 0.0, 2.0), 4.0, parametrization="two_sphere")
    reproj = epi = 0.0
    epi_points = 0
    sampler = SamplerConfig(K=1, P=16)
    for _ in range(n):
        target, ref = random_camera(rng, 0), random_camera(rng, 1)
        px = rng.uniform(0, [target.width - 1, target.height - 1], size=(1, 2))
        ray = ray_from_pixel(target, px)
        # reprojection round trip over the sampling range
        deltas = rng.uniform(frame.near, frame.far, size=(1, 4))
        pix, _ = project_points(target, point_at(ray, deltas))
        reproj = max(reproj, float(np.abs(pix - px[:, None]).max()))
        # epipolar points against the independently assembled fundamental matrix
        grid = sample_epipolar_points(ray, frame, [ref], sampler)
        ok = grid.valid[0, 0]
        if ok.any():
            x2 = np.concatenate([grid.pixels[0, 0][ok], np.ones((int(ok.sum()), 1))], axis=1)
            x1 = np.array([px[0, 0], px[0, 1], 1.0])
            epi = max(epi, float(np.abs(x2 @ fundamental_matrix(target, ref) @ x1).max()))
            epi_points += int(ok.sum())
    # the same oriented world line seen from two unrelated cameras
    ra, rb = coincident_rays(rng, n)
    indep = max(float(np.abs(slab_coords(ra, frame).values - slab_coords(rb, frame).values).max()),
                float(np.abs(sphere_coords(ra, sphere).values - sphere_coords(rb, sphere).values).max()),
                float(np.abs(plucker_coords(ra).values - plucker_coords(rb).values).max()))
    elapsed = time.perf_counter() - start
    ok = reproj < 1e-9 and epi < 1e-6 and indep < 1e-9 and epi_points > n and len(ra) > n // 2 and elapsed < 60
    report(2, ok, f"{n} random camera pairs: reprojection {reproj:.1e} px (<1e-9), epipolar residual {epi:.1e} "
                  f"over {epi_points} points (<1e-6), camera independence {indep:.1e} over {len(ra)} "
                  f"coincident rays (<1e-9), {elapsed:.0f}s (<60s)")
    assert ok


# -- 3 ---------------------------------------------------------------------------------


def _noise_plane_scene(count=3, size=16, baseline=0.3):
    spec = SyntheticSceneSpec(
        primitives=[{"type": "plane", "depth": 3.0, "texture": "noise", "period": 0.1}],
        rig={"kind": "line", "count": count, "baseline": baseline, "image_size": [size, size], "focal": size},
        near=1.5, far=5.0)
    return generate_synthetic(spec)


@pytest.mark.slow
def test_criterion_3_gradient_check(report):
    start = time.perf_counter()
    torch.manual_seed(0)
    scene = _noise_plane_scene()
    model = NeuralLightField(ModelConfig(num_views=3, model_dim=32, num_blocks=2)).double()
    px = np.random.default_rng(0).uniform(0, 15, size=(8, 2)).round()
    batch = make_batch(model, scene, 1, px, SamplerConfig(K=2, P=4), reference_ids=[0, 2])
    clean = grad_check(model, batch, samples_per_group=200, details=True)
    corrupted = grad_check(model, batch, samples_per_group=200, corrupt=("color_head", 0.01))
    elapsed = time.perf_counter() - start
    ok = clean["max_rel_error"] < 1e-6 and corrupted > 1e-3 and elapsed < 300
    report(3, ok, f"2 blocks, dim 32, P=4, K=2, float64: max rel error {clean['max_rel_error']:.1e} (<1e-6, "
                  f"{clean['oracle']} oracle), 1% corrupted color head {corrupted:.1e} (>1e-3), {elapsed:.0f}s (<300s)")
    assert ok


# -- 4 ---------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_4_overfit(report):
    start = time.perf_counter()
    torch.manual_seed(0)
    spec = SyntheticSceneSpec(
        primitives=[
            {"type": "plane", "depth": 3.0, "texture": "noise", "period": 0.12,
             "albedo": [[0.85, 0.7, 0.3], [0.2, 0.35, 0.75]]},
            {"type": "sphere", "center": [0.0, 0.0, 2.0], "radius": 0.3, "albedo": [0.8, 0.4, 0.35]},
        ],
        rig={"kind": "line", "count": 3, "baseline": 0.2, "image_size": [32, 32], "focal": 32},
        near=1.0, far=4.0, samples_per_pixel=2)
    scene = generate_synthetic(spec)
    model = NeuralLightField(ModelConfig(num_views=3, model_dim=32, num_blocks=2))
    sampler = SamplerConfig(K=2, P=16)
    cfg = TrainConfig(batch_size=256, total_steps=2000, warmup_steps=100, base_lr=2e-3)
    opt = OptState.zeros_like(model)
    rng = np.random.default_rng(0)
    target, refs = 1, [0, 2]
    for _ in range(cfg.total_steps):
        flat = rng.choice(32 * 32, size=cfg.batch_size, replace=False)
        px = np.stack([flat % 32, flat // 32], axis=-1).astype(np.float64)
        train_step(model, opt, make_batch(model, scene, target, px, sampler, reference_ids=refs), cfg)
    out = render_image(model, scene, RenderRequest(scene.camera(target)), sampler)
    value = srgb_psnr(out["color"], scene.images[target])
    elapsed = time.perf_counter() - start
    ok = value >= 40.0 and elapsed < 600
    report(4, ok, f"32x32 image, K=2, 2000 steps: PSNR {value:.2f} dB (>=40), {elapsed:.0f}s (<600s)")
    assert ok


# -- 5 ---------------------------------------------------------------------------------


def _train(scene, variant, steps=2000, K=3, P=24):
    torch.manual_seed(0)
    model = NeuralLightField(ModelConfig(num_views=len(scene.train_ids), model_dim=32, num_blocks=2, variant=variant))
    sampler = SamplerConfig(K=K, P=P)
    cfg = TrainConfig(batch_size=256, total_steps=steps, warmup_steps=min(250, steps // 10), base_lr=2e-3)
    Trainer(model, scene, cfg, sampler).run()
    return model, sampler


def _heldout_psnr(model, sampler, scene):
    values = []
    for v in scene.test_ids:
        out = render_image(model, scene, RenderRequest(scene.camera(v)), sampler)
        values.append(srgb_psnr(out["color"], scene.images[v]))
    return float(np.mean(values))


@pytest.mark.slow
def test_criterion_5_generalization(report):
    start = time.perf_counter()
    spec = SyntheticSceneSpec(
        primitives=[
            {"type": "plane", "depth": 4.0, "texture": "checker", "period": 0.25,
             "albedo": [[0.85, 0.75, 0.35], [0.2, 0.35, 0.7]]},
            {"type": "sphere", "center": [0.0, 0.0, 2.5], "radius": 0.5, "albedo": [0.8, 0.35, 0.3]},
        ],
        rig={"kind": "grid", "rows": 4, "cols": 5, "baseline": 0.2, "image_size": [64, 64], "focal": 64},
        near=1.5, far=5.0, holdout=[6, 8, 11, 13], samples_per_pixel=3)
    scene = generate_synthetic(spec)
    assert (len(scene.train_ids), len(scene.test_ids)) == (16, 4)
    full = _heldout_psnr(*_train(scene, "nlf"), scene)
    vanilla = _heldout_psnr(*_train(scene, "vanilla"), scene)
    elapsed = time.perf_counter() - start
    ok = full >= 25.0 and full - vanilla >= 3.0 and elapsed < 3600
    report(5, ok, f"16 train / 4 held-out 64x64 views: full model {full:.2f} dB (>=25), vanilla {vanilla:.2f} dB, "
                  f"margin {full - vanilla:.2f} dB (>=3), {elapsed:.0f}s (<3600s)")
    assert ok


# -- 6 ---------------------------------------------------------------------------------


def _plane_rig():
    return {"kind": "line", "count": 6, "baseline": 0.3, "image_size": [48, 48], "focal": 48}


def _disparity_and_correspondence(z0=3.0):
    spec = SyntheticSceneSpec(
        primitives=[{"type": "plane", "depth": z0, "texture": "noise", "period": 0.1,
                     "albedo": [[0.9, 0.75, 0.3], [0.15, 0.3, 0.8]]}],
        rig=_plane_rig(), near=1.5, far=5.0, samples_per_pixel=2)
    scene = generate_synthetic(spec)
    model, sampler = _train(scene, "nlf", steps=1500, K=2, P=32)
    rel_errors, hits = [], []
    for v in (2, 3):
        cam = scene.camera(v)
        out = render_image(model, scene, RenderRequest(cam, outputs=("disparity",)), sampler)
        rel_errors.append(np.abs(out["disparity"][~out["flagged"]] - 1 / z0) * z0)
        renderer = RayRenderer(model, scene, reference_views_for(scene, cam, sampler), sampler)
        rays = ray_from_pixel(cam, cam.pixel_grid().reshape(-1, 2))
        _, trace, _ = renderer(rays)
        grid = sample_epipolar_points(rays, scene.frame, renderer.references, sampler)
        for j, ref in enumerate(renderer.references):
            truth, _ = project_points(ref, point_at(rays, np.full(len(rays), z0)))
            inside = np.all((truth >= 0) & (truth <= 47), axis=1) & grid.valid[:, j].any(axis=1)
            for r in np.flatnonzero(inside):
                idx, _ = correspondence_map(trace, j, r)
                hits.append(np.linalg.norm(grid.pixels[r, j, idx] - truth[r]) <= 2.0)
    return float(np.median(np.concatenate(rel_errors))), float(np.mean(hits)), len(hits)


def _line_slope(image, mask):
    """Dominant (d col / d row) direction of iso-intensity lines from the structure tensor."""
    smooth = gaussian_filter(image, 1.0)
    gr, gc = np.gradient(smooth)
    m = binary_erosion(mask, iterations=4)
    J = np.array([[np.sum(gc[m] ** 2), np.sum(gc[m] * gr[m])], [np.sum(gc[m] * gr[m]), np.sum(gr[m] ** 2)]])
    _, vecs = np.linalg.eigh(J)
    d = vecs[:, 0]  # least-variation direction (d col, d row)
    return d[0] / d[1]


def _epi_slope_ratio(z1=2.5, z2=4.5):
    spec = SyntheticSceneSpec(
        primitives=[
            {"type": "plane", "depth": z1, "texture": "noise", "period": 0.08,
             "albedo": [[0.95, 0.8, 0.3], [0.1, 0.2, 0.6]], "extent": [-10, 0.0, -10, 10]},
            {"type": "plane", "depth": z2, "texture": "noise", "period": 0.12,
             "albedo": [[0.2, 0.8, 0.4], [0.7, 0.1, 0.3]]},
        ],
        rig=_plane_rig(), near=1.5, far=5.0, samples_per_pixel=2)
    scene = generate_synthetic(spec)
    model, sampler = _train(scene, "nlf", steps=1500, K=2, P=32)
    request = EpiRequest(fixed={"t": 0.0, "v": 0.0}, variable=("s", "u"), ranges=((-0.6, 0.6), (-1.0, 1.0)),
                         resolution=(128, 128), relative=True)
    out = epi_slice(model, scene, request, sampler)
    image = linear_to_srgb(out["image"]).mean(-1)
    rays = slab_to_ray(out["coords"].reshape(-1, 4), scene.frame)
    _, hit = _trace(spec, rays.origin, rays.direction)
    z = (rays.origin[:, 2] + hit * rays.direction[:, 2]).reshape(128, 128)
    measured = _line_slope(image, np.isclose(z, z1)) / _line_slope(image, np.isclose(z, z2))
    # slopes go as 1 / depth, with depth measured from the st plane the rows sweep along
    z_st = scene.frame.z_st
    expected = (z2 - z_st) / (z1 - z_st)
    return measured, expected


@pytest.mark.slow
def test_criterion_6_interpretability(report):
    start = time.perf_counter()
    disparity_err, within, count = _disparity_and_correspondence()
    measured, expected = _epi_slope_ratio()
    ratio_err = abs(measured / expected - 1)
    elapsed = time.perf_counter() - start
    ok = disparity_err < 0.05 and within >= 0.9 and ratio_err <= 0.10 and elapsed < 900
    report(6, ok, f"disparity median rel error {disparity_err:.2%} (<5%), correspondence within 2px "
                  f"{within:.1%} of {count} rays (>=90%), EPI slope ratio {measured:.3f} vs {expected:.3f} "
                  f"({ratio_err:.1%}, <=10%), {elapsed:.0f}s (<900s)")
    assert ok


# -- 7 ---------------------------------------------------------------------------------


def test_criterion_7_model_invariants(report, tmp_path):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    torch.manual_seed(7)
    model = tiny_model(num_views=6)
    worst = {"norm": 0.0, "perm": 0.0}
    masked_exact = in_range = True
    with torch.no_grad():
        for _ in range(100):
            B, K, P = (int(v) for v in rng.integers(1, [6, 5, 9]))
            grid = random_grid(rng, B=B, K=K, P=P, valid_frac=0.6, view_ids=rng.permutation(6)[:K])
            coords = rng.normal(size=(B, 4)) * 3
            rgb, trace = model(coords, grid)
            worst["norm"] = max(worst["norm"], float((trace.alpha.sum(-1) - 1).abs().max()),
                                float((trace.beta.sum(-1) - 1).abs().max()))
            in_range &= bool(torch.all((rgb > 0) & (rgb < 1)))
            rgb_v, _ = model(coords, grid.permute_views(rng.permutation(K)))
            rgb_p, _ = model(coords, grid.permute_points(rng.permutation(P)))
            worst["perm"] = max(worst["perm"], float((rgb - rgb_v).abs().max()), float((rgb - rgb_p).abs().max()))
            inv = torch.as_tensor(~grid.valid)
            colors, feats = grid.colors.clone(), grid.features.clone()
            colors[inv] = torch.as_tensor(rng.uniform(size=(int(inv.sum()), 3)))
            feats[inv] = torch.as_tensor(rng.normal(size=(int(inv.sum()), 32)) * 5)
            rgb_m, _ = model(coords, replace(grid, colors=colors, features=feats))
            masked_exact &= bool(torch.equal(rgb, rgb_m))
    # checkpoint bitwise round trip
    f32 = tiny_model(num_views=6).float()
    save_checkpoint(f32, OptState.zeros_like(f32), tmp_path / "m.nlf")
    back, _ = load_checkpoint(tmp_path / "m.nlf")
    ckpt_ok = all(torch.equal(a, b) for a, b in zip(f32.state_dict().values(), back.state_dict().values()))
    # block-size independent rendering
    scene = _noise_plane_scene(count=4, size=12)
    sampler = SamplerConfig(K=2, P=6)
    renders = [render_image(f32, scene, RenderRequest(scene.camera(1), bs, ("color", "depth")), sampler)
               for bs in (1, 7, 4096)]
    block_ok = all(np.array_equal(renders[0][k], r[k]) for r in renders[1:] for k in ("color", "depth"))
    elapsed = time.perf_counter() - start
    ok = (worst["norm"] <= 1e-5 and worst["perm"] <= 1e-5 and masked_exact and in_range and ckpt_ok and block_ok
          and elapsed < 300)
    report(7, ok, f"100 random inputs: normalization {worst['norm']:.1e} (<=1e-5), permutation {worst['perm']:.1e} "
                  f"(<=1e-5), masked content exact={masked_exact}, colors in (0,1)={in_range}, "
                  f"checkpoint bitwise={ckpt_ok}, block-size bitwise={block_ok}, {elapsed:.0f}s (<300s)")
    assert ok
