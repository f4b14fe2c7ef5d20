"""EDM super-resolution for volumetric grayscale images.

A 3D patch pipeline and a 2.5D slice pipeline share one preconditioned
denoiser, trained with AdamW on a small numpy autodiff engine.
"""

from .config import ConfigError, RunConfig, load_config
from .diffgraph import GraphError, ParameterStore, Tensor, grad_check, load_checkpoint, save_checkpoint
from .edm import (OptimizerState, Preconditioner, SigmaDistribution, TrainConfig, TrainState, adamw_step,
                  denoise, edm_loss, precondition_coeffs, sample_sigma, train)
from .metrics import MetricReport, MetricRow, error_heatmap, evaluate_volume, psnr, ssim, write_report
from .nifti_io import NiftiError, NiftiHeader, read_volume, write_volume
from .samplers import NoiseSchedule, euler_sample, heun_sample, karras_schedule
from .sr3d import PatchPlan, blend_patches, plan_patches, super_resolve_3d, trilinear_baseline
from .sr25d import SliceCondition, bicubic_baseline, build_slice_condition, super_resolve_25d
from .synth import synth_volume
from .unet import UNet, UNetConfig, build_denoiser, desk_config, paper_config, param_count
from .volume import (Domain, Volume, VolumeError, VolumePair, bicubic_upsample_slice, block_average_downsample,
                     degrade, from_unit, percentile_normalize, to_unit, trilinear_upsample)

__version__ = "0.1.0"
