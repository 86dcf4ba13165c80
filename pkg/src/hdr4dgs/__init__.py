"""HDR dynamic scene reconstruction with 4D Gaussian splatting and a learned, temporally conditioned tone mapper."""

from .camera import Camera, orbit_cameras
from .datagen import Manifest, SceneSpec, apply_crf, render_hdr_gt, write_dataset
from .errors import (
    CheckpointError,
    ColdBank,
    ContractViolation,
    DegenerateRotation,
    DegenerateTemporalVariance,
    EmptyScene,
    HDR4DGSError,
    InvalidExposure,
    ManifestError,
    NonFiniteGradient,
    NonFiniteParameter,
)
from .losses import LossWeights, dssim, l1, mu_law, psnr, recon_loss, ssim, total_loss
from .rasterizer import DEFAULT_SETTINGS, EXACT_SETTINGS, RasterSettings, render, render_frame
from .scene import Gaussian4DCloud, build_covariance4, conditional_spatial, eval_color_4dsh, temporal_weight
from .tonemap import ToneMapperState, dtm_apply, radiance_signature, tone_map_colors, tone_map_image
from .trainer import TrainConfig, adam_step, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
