"""Base -> super-resolution orchestration.

The base stage sees area-downsampled endpoint frames and generates 7 low-res
frames; the SR stage consumes the original high-res endpoints plus the
(noise-augmented) low-res frames and emits the 7 high-res frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .conditioning import ConditioningPair, noise_augment
from .errors import ConfigError
from .resize import area_downsample, naive_upsample
from .sampling import SamplerConfig, derive_seed, sample_video

__all__ = [
    "CascadeConfig",
    "cascade_sample",
    "naive_upsample",
    "area_downsample",
]


@dataclass(frozen=True)
class CascadeConfig:
    base_sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sr_sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sr_aug_level: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.sr_aug_level <= 0.5:
            raise ConfigError(f"sr_aug_level must lie in [0, 0.5], got {self.sr_aug_level}")


def cascade_sample(
    base_model,
    sr_model,
    cond_hi: ConditioningPair,
    cfg: CascadeConfig,
    return_intermediates: bool = False,
    seeds: list[int] | None = None,
) -> Tensor | tuple[Tensor, Tensor, Tensor]:
    """Sample 7 high-res frames from a high-res endpoint pair.

    Deterministic given the two sampler seeds. With return_intermediates the
    raw base output and the augmented SR conditioning are also returned.
    `seeds` gives each batch element its own noise streams for both stages.
    """
    hi = sr_model.config.frame_size
    lo = base_model.config.frame_size
    if cond_hi.start.shape[-1] != hi:
        raise ConfigError(
            f"conditioning is {cond_hi.start.shape[-1]}px but the SR stage expects {hi}px"
        )
    if hi % lo:
        raise ConfigError(f"SR size {hi} is not an integer multiple of base size {lo}")
    factor = hi // lo

    cond_lo = ConditioningPair(
        start=area_downsample(cond_hi.start, factor),
        end=area_downsample(cond_hi.end, factor),
        dropped=cond_hi.dropped.clone(),
    )
    base_seeds = sr_seeds = None
    if seeds is not None:
        base_seeds = [derive_seed(s, "stage:base") for s in seeds]
        sr_seeds = [derive_seed(s, "stage:sr") for s in seeds]
    low_res = sample_video(base_model, cond_lo, cfg.base_sampler, seeds=base_seeds)

    if cfg.sr_aug_level > 0:
        gen = torch.Generator(low_res.device).manual_seed(
            derive_seed(cfg.sr_sampler.seed, "sr_aug")
        )
        augmented, level = noise_augment(low_res, gen, level=cfg.sr_aug_level)
    else:
        augmented, level = low_res, 0.0
    out = sample_video(
        sr_model, cond_hi, cfg.sr_sampler,
        low_res_cond=augmented, aug_level=level, seeds=sr_seeds,
    )
    if return_intermediates:
        return out, low_res, augmented
    return out
