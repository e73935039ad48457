"""Neural light field rendering with two-stage attention over epipolar samples."""

from .errors import *  # noqa: F401,F403
from .geometry import (
    CameraModel,
    LightFieldCoords,
    Ray,
    SceneFrame,
    plucker_coords,
    point_at,
    project,
    project_points,
    ray_coords,
    ray_coords_masked,
    ray_from_pixel,
    slab_coords,
    slab_to_ray,
    sphere_coords,
)
from .encoding import CameraEmbeddingTable, FourierConfig, SphericalConfig, embed_camera, fourier_encode, sh_encode
from .sampler import (
    EpipolarSampleGrid,
    SamplerConfig,
    gather_colors_and_features,
    sample_epipolar_points,
    select_reference_views,
)
from .model import ModelConfig, NeuralLightField, RenderTrace, attention_pool, epipolar_aggregate, view_aggregate
from .train import OptState, TrainConfig, Trainer, aux_color, grad_check, loss_fn, lr_schedule, train_step
from .render import (
    EpiRequest,
    RenderRequest,
    correspondence_map,
    disparity_map,
    epi_slice,
    render_image,
    view_attention_image,
)
from .scene import (
    Scene,
    SyntheticSceneSpec,
    generate_synthetic,
    load_checkpoint,
    load_scene,
    save_checkpoint,
    save_scene,
)
from .metrics import EvalReport, avg_metric, psnr, ssim

__version__ = "0.1.0"
