"""Progressive Retinex low-light enhancement.

Two small networks built only from 1x1 convolutions and max pooling estimate a
per-patch illumination scale (IM-Net) and noise level (NM-Net). They take turns
refining each other's estimate, after which the image is divided by the
illumination map and denoised with a noise-guided DCT filter.
"""

from .camera import SynthParams, build_dataset, get_crf, synthesize_lowlight
from .enhance import EnhanceConfig, enhance_with_maps, retinex_enhance
from .metrics import psnr, ssim
from .networks import TrainConfig, build_im_net, build_nm_net, forward, predict, train
from .progressive import (ProgressiveConfig, StageModels, infer_maps, infer_patch, load_stage_models,
                          save_stage_models, train_progressive)

__version__ = "0.1.0"
