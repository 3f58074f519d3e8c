"""Physics-guided conditional diffusion for underwater image enhancement."""

from .grids import EPS_T, GridError, ImageGrid, PhysicsPrior
from .physics import (
    SynthParams,
    degrade,
    gaussian_blur,
    recover,
    smooth_color_field,
    synth_pair,
)
from .diffusion import (
    DiffusionSchedule,
    SkipPlan,
    diffusion_loss,
    make_schedule,
    make_skip_plan,
    p_step,
    q_sample,
    skip_sample,
)
from .metrics import MetricReport, psnr, ssim, uciqe, uiqm
from .training import TrainConfig, fit, init_state, train_step

__all__ = [
    "EPS_T",
    "GridError",
    "ImageGrid",
    "PhysicsPrior",
    "SynthParams",
    "degrade",
    "gaussian_blur",
    "recover",
    "smooth_color_field",
    "synth_pair",
    "DiffusionSchedule",
    "SkipPlan",
    "diffusion_loss",
    "make_schedule",
    "make_skip_plan",
    "p_step",
    "q_sample",
    "skip_sample",
    "MetricReport",
    "psnr",
    "ssim",
    "uciqe",
    "uiqm",
    "TrainConfig",
    "fit",
    "init_state",
    "train_step",
]

__version__ = "0.1.0"
