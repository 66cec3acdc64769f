"""Learned fractional-factor downsampling.

A stride-1 convolution followed by a differentiable resizer (the
conv-resize block) lets a CNN downsample by any rational factor.  This
package provides the resamplers, the CNN-CR network built on that block,
a numpy training loop, and a BD-rate harness for encode ladders.
"""

from .errors import ConvResizeError
from .metrics import RateQualityCurve, bd_rate, psnr, ssim
from .nn import BlockKind, ConvLayer, Network, build_cnncr, load_checkpoint, network_backward, network_forward, save_checkpoint
from .resample import BICUBIC, BILINEAR, LANCZOS3, FilterKind, resize_by_scale, resize_forward
from .tensor import parse_scale
from .train import TrainConfig, crop_size, train_loop

__version__ = "0.1.0"

__all__ = [
    "BICUBIC",
    "BILINEAR",
    "LANCZOS3",
    "BlockKind",
    "ConvLayer",
    "ConvResizeError",
    "FilterKind",
    "Network",
    "RateQualityCurve",
    "TrainConfig",
    "bd_rate",
    "build_cnncr",
    "crop_size",
    "load_checkpoint",
    "network_backward",
    "network_forward",
    "parse_scale",
    "psnr",
    "resize_by_scale",
    "resize_forward",
    "save_checkpoint",
    "ssim",
    "train_loop",
]
