"""Few-shot time-series generation via delay-embedding diffusion."""

__version__ = "0.1.0"

from .data import DatasetSpec, SubsetSpec, generate_ar1, generate_sine  # noqa: F401
from .denoiser import DenoiserUNet, ModelConfig, count_parameters  # noqa: F401
from .diffusion import DiffusionConfig, precondition_coeffs, sample  # noqa: F401
from .dyconv import CanonicalKernel, DyConv2d, flops_estimate, interp_kernel  # noqa: F401
from .metrics import (EvalProtocol, context_fid, discriminative_score,  # noqa: F401
                      frechet_distance, predictive_score)
from .trainer import TrainConfig, finetune, pretrain  # noqa: F401
from .ts2img import (EmbedConfig, ImageTensor, TimeSeries, build_mask,  # noqa: F401
                     delay_embed, inverse_delay_embed)
