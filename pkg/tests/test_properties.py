"""Property-based checks of the invariants over generated inputs."""

import numpy as np
import pytest
import torch
from dataclasses import replace
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from nlf.encoding import FourierConfig, fourier_encode, sh_encode
from nlf.geometry import CameraModel, Ray, SceneFrame, plucker_coords, point_at, project, ray_from_pixel, slab_coords, slab_to_ray
from nlf.metrics import avg_metric, psnr, ssim
from nlf.model import attention_pool
from nlf.render import RenderRequest, render_image
from nlf.sampler import SamplerConfig, select_reference_views
from nlf.scene import load_checkpoint, save_checkpoint
from nlf.train import TrainConfig, aux_color, loss_fn, lr_schedule

from conftest import line_scene, random_grid, tiny_model

seeds = st.integers(0, 2**32 - 1)
finite = st.floats(-50, 50, allow_nan=False)
common = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])


def vec(n, lo=-50.0, hi=50.0):
    return st.lists(st.floats(lo, hi, allow_nan=False), min_size=n, max_size=n).map(np.array)


@st.composite
def cameras(draw):
    rotvec = draw(vec(3, -3.0, 3.0))
    t = draw(vec(3, -5.0, 5.0))
    fx, fy = draw(st.floats(5, 500)), draw(st.floats(5, 500))
    cx, cy = draw(st.floats(0, 64)), draw(st.floats(0, 64))
    K = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    return CameraModel(K, Rotation.from_rotvec(rotvec).as_matrix(), t, (64, 64))


# -- geometry --------------------------------------------------------------------------


@common
@given(cameras(), vec(2, 0.0, 63.0), st.floats(0.5, 20.0))
def test_reprojection_round_trip(cam, pixel, delta):
    pix, depth = project(cam, point_at(ray_from_pixel(cam, pixel), delta))
    assert np.abs(pix - pixel).max() < 1e-9
    assert depth == pytest.approx(delta, rel=1e-12)


@common
@given(vec(3), vec(3, -1, 1).filter(lambda d: np.linalg.norm(d) > 1e-3), st.floats(-10, 10))
def test_plucker_invariants(origin, direction, shift):
    a = plucker_coords(Ray(origin, direction)).values
    b = plucker_coords(Ray(origin + shift * direction, 2.5 * direction)).values
    assert abs(np.dot(a[:3], a[3:])) < 1e-9
    assert abs(np.linalg.norm(a[:3]) - 1) < 1e-9
    assert np.abs(a - b).max() < 1e-9


@common
@given(vec(4, -5, 5), st.floats(0.5, 3), st.floats(3.5, 9))
def test_slab_inverse(coords, z_st, z_uv):
    frame = SceneFrame(z_st, z_uv, near=z_st, far=z_uv)
    assert np.abs(slab_coords(slab_to_ray(coords, frame), frame).values - coords).max() < 1e-9


# -- encodings ---------------------------------------------------------------------------


@common
@given(st.lists(finite, min_size=1, max_size=8), st.integers(1, 8))
def test_fourier_dim_and_range(values, L):
    out = fourier_encode(np.array(values), FourierConfig(L))
    assert out.shape == (2 * L * len(values),)
    assert np.all(np.abs(out) <= 1)


@common
@given(st.floats(0, np.pi), st.floats(-np.pi, np.pi), st.floats(0, np.pi), st.floats(-np.pi, np.pi))
def test_sh_swap(t1, p1, t2, p2):
    a = sh_encode(np.array([t1, p1, t2, p2]))
    b = sh_encode(np.array([t2, p2, t1, p1]))
    assert np.array_equal(a[:9], b[9:]) and np.array_equal(a[9:], b[:9])
    assert a[0] == pytest.approx(0.28209479177387814)


# -- pooling and model -------------------------------------------------------------------


@common
@given(seeds, st.integers(1, 6), st.floats(-30, 30))
def test_pool_normalization_and_shift(seed, S, shift):
    rng = np.random.default_rng(seed)
    items = torch.as_tensor(rng.normal(size=(3, S, 4)))
    mask = torch.as_tensor(rng.uniform(size=(3, S)) < 0.6)
    mask[:, 0] = True
    q = torch.as_tensor(rng.normal(size=(3, 4)))
    w = torch.as_tensor(rng.normal(size=8))
    _, a, _ = attention_pool(q, items, w, mask)
    _, b, _ = attention_pool(q + shift, items, w, mask)
    assert torch.allclose(a.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-12)
    assert torch.all(a[~mask] == 0)
    assert torch.allclose(a, b, atol=1e-7)


@pytest.fixture(scope="module")
def models():
    torch.manual_seed(0)
    return {p: tiny_model(parametrization=p) for p in ("slab", "plucker")}


@common
@given(seeds, st.integers(1, 4), st.integers(1, 4), st.integers(1, 7), st.sampled_from(["slab", "plucker"]))
def test_model_invariants(models, seed, B, K, P, param):
    rng = np.random.default_rng(seed)
    model = models[param]
    C = 6 if param == "plucker" else 4
    ids = rng.permutation(4)[:K]
    grid = random_grid(rng, B=B, K=K, P=P, C=C, valid_frac=0.6, view_ids=ids)
    coords = rng.normal(size=(B, C))
    rgb, trace = model(coords, grid)
    # normalization and range
    assert torch.allclose(trace.alpha.sum(-1), torch.ones(B, K, dtype=torch.float64), atol=1e-5)
    assert torch.allclose(trace.beta.sum(-1), torch.ones(B, dtype=torch.float64), atol=1e-5)
    assert torch.all((rgb > 0) & (rgb < 1))
    # set symmetry
    vperm, pperm = rng.permutation(K), rng.permutation(P)
    rgb_v, trace_v = model(coords, grid.permute_views(vperm))
    assert torch.allclose(rgb, rgb_v, atol=1e-5)
    assert torch.allclose(trace.beta[:, vperm], trace_v.beta, atol=1e-5)
    rgb_p, _ = model(coords, grid.permute_points(pperm))
    assert torch.allclose(rgb, rgb_p, atol=1e-5)
    # masked content never matters
    inv = torch.as_tensor(~grid.valid)
    colors, feats = grid.colors.clone(), grid.features.clone()
    colors[inv] = torch.as_tensor(rng.uniform(size=(int(inv.sum()), 3)))
    feats[inv] = torch.as_tensor(rng.normal(size=(int(inv.sum()), 32)) * 10)
    rgb_m, _ = model(coords, replace(grid, colors=colors, features=feats))
    assert torch.equal(rgb, rgb_m)
    # auxiliary color stays inside the box of valid colors
    aux = aux_color(trace, grid.colors)
    for b in range(B):
        valid_colors = grid.colors[b][torch.as_tensor(grid.valid[b])]
        assert torch.all(aux[b] >= valid_colors.min(0).values - 1e-12)
        assert torch.all(aux[b] <= valid_colors.max(0).values + 1e-12)


# -- training -------------------------------------------------------------------------------


@common
@given(seeds, st.floats(0, 4))
def test_loss_nonnegative_zero_iff_equal(seed, lam):
    rng = np.random.default_rng(seed)
    gt = torch.as_tensor(rng.uniform(size=(5, 3)))
    assert float(loss_fn(gt, gt, gt, lam)) == 0.0
    pred = torch.as_tensor(rng.uniform(size=(5, 3)))
    assert float(loss_fn(pred, gt, gt, lam)) > 0


@common
@given(st.integers(2, 500), st.integers(1, 2000), st.floats(1e-6, 1.0))
def test_lr_schedule_shape(warmup, extra, lr):
    cfg = TrainConfig(total_steps=warmup + extra, warmup_steps=warmup, base_lr=lr)
    values = np.array([lr_schedule(s, cfg) for s in range(cfg.total_steps + 1)])
    assert values.argmax() == warmup and values.max() == pytest.approx(lr)
    # piecewise linear: constant increments on each side of the warmup boundary
    up, down = np.diff(values[:warmup + 1]), np.diff(values[warmup:])
    assert np.allclose(up, lr / warmup) and np.allclose(down, -lr / extra)


@common
@given(seeds, st.integers(2, 9), st.integers(1, 4))
def test_select_subset_of_nearest(seed, n, K):
    rng = np.random.default_rng(seed)
    cams = [CameraModel.from_focal(10.0, (8, 8), translation=-rng.normal(size=3), view_id=i) for i in range(n + 1)]
    if K > n:
        return
    N = int(rng.integers(K, n + 1))
    target = cams[0]
    dist = sorted((np.linalg.norm(c.center - target.center), c.view_id) for c in cams[1:])
    nearest = {vid for _, vid in dist[:N]}
    sel = select_reference_views(target, cams, SamplerConfig(K=K, N=N, training_mode=True), rng)
    assert len(set(sel)) == K and set(sel) <= nearest and 0 not in sel


# -- metrics ---------------------------------------------------------------------------------


@common
@given(st.floats(5, 60), st.floats(0, 0.99), st.floats(0.01, 0.9), st.floats(0.01, 1))
def test_avg_metric_monotone(p, s, lp, step):
    base = avg_metric(p, s, lp)
    assert avg_metric(p + step, s, lp) < base
    assert avg_metric(p, min(s + step / 100, 0.999), lp) < base
    assert avg_metric(p, s, lp + step) > base


@common
@given(seeds)
def test_metric_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 12, 13, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == ssim(b, a)
    assert -1 <= ssim(a, b) <= 1


# -- persistence and rendering ---------------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_checkpoint_bitwise(tmp_path_factory, seed):
    gen = torch.Generator().manual_seed(seed)
    model = tiny_model().float()
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen) * 10 ** float(torch.randint(-8, 8, (), generator=gen)))
    path = tmp_path_factory.mktemp("ckpt") / "m.nlf"
    save_checkpoint(model, None, path)
    back, _ = load_checkpoint(path)
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k


@pytest.fixture(scope="module")
def render_setup():
    torch.manual_seed(1)
    return line_scene(count=3, size=8), tiny_model(num_views=3).float()


@settings(max_examples=10, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.integers(1, 80))
def test_block_size_independent(render_setup, block):
    scene, model = render_setup
    s = SamplerConfig(K=2, P=4)
    a = render_image(model, scene, RenderRequest(scene.camera(1), block, ("color", "depth")), s)
    b = render_image(model, scene, RenderRequest(scene.camera(1), 64, ("color", "depth")), s)
    assert np.array_equal(a["color"], b["color"]) and np.array_equal(a["depth"], b["depth"])
