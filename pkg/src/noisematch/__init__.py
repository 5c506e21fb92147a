"""Unsupervised point cloud denoising by consistency-aware noise-to-noise matching."""
from .errors import *  # noqa: F401,F403
from .geometry import (
    Label,
    NeighborIndex,
    NormalizationTransform,
    Patch,
    PointCloud,
    add_gaussian_noise,
    bounding_sphere_radius,
    build_knn_index,
    denormalize,
    extract_patches,
    farthest_point_sample,
    k_nearest,
    normalize_patch,
    parametric_mesh,
    sample_parametric_shape,
)
from .transport import (
    Matching,
    TriangleMesh,
    chamfer_distance,
    emd_bruteforce,
    emd_exact,
    emd_gradient,
    emd_sinkhorn,
    point_to_mesh,
)
from .network import DenoiserConfig, DenoiserParams, denoise_multistep, denoise_step, init_params
from .training import ObservationSet, TrainConfig, loss_dc, loss_n2c, loss_n2n, total_loss, train
from .pipeline import denoise_cloud, toy_dataset, upsample
from .image import ImageGrid, ZsConfig, downsample_pair, psnr, zs_denoise
from .estimators import PointCloudDenoiser, ZeroShotImageDenoiser

__version__ = "0.1.0"
