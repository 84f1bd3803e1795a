"""Resolution changes between cascade stages.

Bilinear for going up (the SR model's "naive" conditioning pathway), area
averaging for going down (producing base-stage data from high-res frames).
Both operate on (..., C, H, W) stacks and fold any leading dims.
"""

from __future__ import annotations

import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError


def _fold(frames: Tensor):
    lead = frames.shape[:-3]
    return frames.reshape(-1, *frames.shape[-3:]), lead


def naive_upsample(frames: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor; constant frames stay constant."""
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return frames
    flat, lead = _fold(frames)
    out = F.interpolate(flat, scale_factor=factor, mode="bilinear", align_corners=False)
    return out.reshape(*lead, *out.shape[-3:])


def area_downsample(frames: Tensor, factor: int) -> Tensor:
    """Box-filter downsampling by an integer factor."""
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"downsampling factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return frames
    if frames.shape[-1] % factor or frames.shape[-2] % factor:
        raise ConfigError(
            f"spatial size {tuple(frames.shape[-2:])} is not divisible by factor {factor}"
        )
    flat, lead = _fold(frames)
    out = F.avg_pool2d(flat, kernel_size=factor)
    return out.reshape(*lead, *out.shape[-3:])
