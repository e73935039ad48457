import numpy as np
import pytest
import torch
from scipy.spatial.transform import Rotation

from nlf.geometry import CameraModel, Ray, point_at, project, ray_from_pixel
from nlf.scene import SyntheticSceneSpec, generate_synthetic


def random_camera(rng, view_id=0, size=(64, 48)):
    """Camera with random pose and intrinsics looking roughly along +z."""
    R = Rotation.from_rotvec(rng.normal(scale=0.3, size=3)).as_matrix()
    center = rng.normal(scale=0.5, size=3)
    fx, fy = rng.uniform(30, 90, size=2)
    K = np.array([[fx, 0.0, rng.uniform(20, 40)], [0.0, fy, rng.uniform(15, 30)], [0.0, 0.0, 1.0]])
    return CameraModel(K, R, -R @ center, size, view_id)


def coincident_rays(rng, n):
    """Pairs of camera rays lying on the same oriented world line."""
    rays_a, rays_b = [], []
    for _ in range(n):
        cam_a = random_camera(rng)
        px = rng.uniform(0, [cam_a.width - 1, cam_a.height - 1])
        ra = ray_from_pixel(cam_a, px)
        # second camera sits further along the line with its own pose
        cam_b = random_camera(rng)
        center_b = point_at(ra, rng.uniform(0.1, 0.6))
        cam_b = CameraModel(cam_b.intrinsics, cam_b.rotation, -cam_b.rotation @ center_b, cam_b.image_size)
        pix_b, depth_b = project(cam_b, point_at(ra, 3.0))
        if depth_b <= 0:
            continue
        rays_a.append(ra)
        rays_b.append(ray_from_pixel(cam_b, pix_b))
    stack = lambda rs: Ray(np.stack([r.origin for r in rs]), np.stack([r.direction for r in rs]))
    return stack(rays_a), stack(rays_b)


def fundamental_matrix(cam1, cam2):
    """F with x2^T F x1 = 0, assembled from both cameras' K, R, t."""
    R = cam2.rotation @ cam1.rotation.T
    t = cam2.translation - R @ cam1.translation
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    F = np.linalg.inv(cam2.intrinsics).T @ tx @ R @ np.linalg.inv(cam1.intrinsics)
    return F / np.linalg.norm(F)


def line_scene(count=3, size=16, depth=3.0, baseline=0.3, texture="noise", period=0.1, **kw):
    spec = SyntheticSceneSpec(
        primitives=[{"type": "plane", "depth": depth, "texture": texture, "period": period}],
        rig={"kind": "line", "count": count, "baseline": baseline, "image_size": [size, size], "focal": size},
        near=1.5, far=5.0, **kw,
    )
    return generate_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return line_scene()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def random_grid(rng, B=3, K=2, P=5, C=4, channels=32, valid_frac=0.8, view_ids=None):
    """Populated epipolar grid with random content (geometry need not be consistent)."""
    from nlf.sampler import EpipolarSampleGrid

    valid = rng.uniform(size=(B, K, P)) < valid_frac
    valid[:, :, 0] = True  # every view keeps at least one point
    points = rng.normal(size=(B, 1, P, 3))
    return EpipolarSampleGrid(
        view_ids=np.arange(K) if view_ids is None else np.asarray(view_ids),
        points3d=np.broadcast_to(points, (B, K, P, 3)),
        deltas=np.sort(rng.uniform(1, 5, size=(B, P)), axis=1),
        pixels=rng.uniform(0, 10, size=(B, K, P, 2)),
        ray_coords=rng.normal(size=(B, K, P, C)) * valid[..., None],
        valid=valid,
        colors=torch.as_tensor(rng.uniform(size=(B, K, P, 3)) * valid[..., None]),
        features=torch.as_tensor(rng.normal(size=(B, K, P, channels)) * valid[..., None]),
    )


def tiny_model(**kw):
    from nlf.model import ModelConfig, NeuralLightField

    cfg = dict(num_views=4, model_dim=16, num_blocks=2, embed_dim=256)
    cfg.update(kw)
    return NeuralLightField(ModelConfig(**cfg)).double()
