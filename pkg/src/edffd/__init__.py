"""Exponential-decay free-form deformation engine and registration pipeline."""

from .basis import KernelConfig, bspline_basis_product, cubic_bspline, exp_decay_weight
from .correlation import (
    FeatureMap,
    Flow,
    GlobalCorrelationVolume,
    LocalCorrelationVolume,
    extract_features,
    global_correlation,
    local_correlation,
    local_volume_to_flow,
    volume_to_flow,
)
from .energies import (
    GridEdges,
    LossWeights,
    content_loss,
    inter_grid_loss,
    intra_grid_loss,
    photometric_grad,
    stage_photometric_loss,
    total_loss,
)
from .estimators import ImageRegistration
from .image import (
    ImageBuffer,
    Mask,
    Pyramid,
    build_pyramid,
    load_image,
    luminance,
    psnr_masked,
    sample_bilinear,
    save_image,
)
from .pipeline import (
    RegistrationConfig,
    RegistrationResult,
    estimate_homography_stage,
    make_synthetic_pair,
    mean_endpoint_error,
    refine_stage,
    register,
)
from .warps import (
    ControlGrid,
    DisplacementField,
    FourPointMotion,
    Homography,
    SamplingMap,
    apply_homography,
    bspline_ffd_field,
    compose_sampling_map,
    edffd_field,
    four_point_to_homography,
    invert_homography,
    tps_field,
    warp_image,
)

__version__ = "0.1.0"

__all__ = [
    "ControlGrid",
    "DisplacementField",
    "FeatureMap",
    "Flow",
    "FourPointMotion",
    "GlobalCorrelationVolume",
    "GridEdges",
    "Homography",
    "ImageBuffer",
    "ImageRegistration",
    "KernelConfig",
    "LocalCorrelationVolume",
    "LossWeights",
    "Mask",
    "Pyramid",
    "RegistrationConfig",
    "RegistrationResult",
    "SamplingMap",
    "apply_homography",
    "bspline_basis_product",
    "bspline_ffd_field",
    "build_pyramid",
    "compose_sampling_map",
    "content_loss",
    "cubic_bspline",
    "edffd_field",
    "estimate_homography_stage",
    "exp_decay_weight",
    "extract_features",
    "four_point_to_homography",
    "global_correlation",
    "inter_grid_loss",
    "intra_grid_loss",
    "invert_homography",
    "load_image",
    "local_correlation",
    "local_volume_to_flow",
    "luminance",
    "make_synthetic_pair",
    "mean_endpoint_error",
    "photometric_grad",
    "psnr_masked",
    "refine_stage",
    "register",
    "sample_bilinear",
    "save_image",
    "stage_photometric_loss",
    "total_loss",
    "tps_field",
    "volume_to_flow",
    "warp_image",
]
