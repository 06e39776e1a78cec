"""Continuous-time cone-beam CT reconstruction with deformable radiative
Gaussian kernels and a self-supervised breathing-period learner."""

from .deform import CoordDomain, DeformDecoder, PlaneGrid, deform, deform_backward, encode, normalize_coords
from .evaluation import dominant_period, period_error_ms, psnr3d, ssim_slices, volume_curve
from .gaussians import (
    GaussianSet,
    Volume,
    covariance,
    evaluate_density,
    init_from_backprojection,
    voxelize,
)
from .geometry import Box, ConeBeamGeometry, Ray, detector_rays, make_ray
from .losses import LossWeights, dssim, l1, total_loss, tv3d, tv4d
from .model import ReconModel, deformed_at, render_at_time
from .period import LearnablePeriod, period_estimate, periodic_consistency_loss, sample_shift
from .phantom import (
    BreathingPhantom,
    ProjectionSet,
    default_phantom,
    generate_dataset,
    phantom_density,
    phantom_volume,
    simulate_projection,
)
from .renderer import ray_integral, render_backward, render_image
from .training import TrainConfig, TrainingError, desk_config, fit, lr_at, paper_config, train_step

__version__ = "0.1.0"
