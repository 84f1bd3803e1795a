"""Model-input assembly and conditioning plumbing.

Turns (start frame, end frame, noisy middle frames) into the 9-frame stack
the denoiser sees, with per-frame log-SNR markers and timestamps. Also
implements conditioning dropout for classifier-free guidance, the per-frame
embedding (noise level + timestamp, with a learned null token for dropped
frames), and noise conditioning augmentation for the super-resolution stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .diffusion import (
    DEFAULT_SCHEDULE,
    LogSnrSchedule,
    NoisyVideo,
    forward_sample,
    log_snr,
)
from .errors import ConfigError, DomainError, ShapeError, StateError

FRAME_COUNT = 9
COND_SLOTS = (0, 8)
GENERATED_SLOTS = slice(1, 8)

# sinusoidal position argument for log-SNR embeddings; keeps +-20 within the
# well-resolved band of the encoding
LOG_SNR_EMBED_SCALE = 0.25


def frame_timestamps(n: int = FRAME_COUNT) -> Tensor:
    """Timestamps i/(n-1) for an n-frame clip."""
    return torch.linspace(0.0, 1.0, n)


@dataclass
class ConditioningPair:
    """Start/end frames of a clip, (B, C, H, W) each, plus per-example drop flags.

    Dropped entries hold i.i.d. unit-Gaussian content and are marked with the
    maximum noise level when assembled into a model input.
    """

    start: Tensor
    end: Tensor
    dropped: Tensor  # (B,) bool

    def __post_init__(self):
        if self.start.shape != self.end.shape:
            raise ShapeError(
                f"start {tuple(self.start.shape)} and end {tuple(self.end.shape)} differ"
            )
        if self.start.ndim != 4:
            raise ShapeError("conditioning frames must be (batch, channels, H, W)")
        if self.dropped.shape != (self.start.shape[0],):
            raise ShapeError("dropped flags must be one bool per batch element")

    @classmethod
    def from_frames(cls, start: Tensor, end: Tensor) -> "ConditioningPair":
        return cls(start=start, end=end, dropped=torch.zeros(start.shape[0], dtype=torch.bool))

    @property
    def batch_size(self) -> int:
        return self.start.shape[0]


@dataclass
class ModelInput:
    """The assembled 9-frame denoiser input.

    frames: (B, 9, C, H, W), slots 0 and 8 are conditioning.
    log_snr: (B, 9) per-frame noise-level markers.
    timestamps: (B, 9) in [0, 1]; meaningless where null_mask is set.
    null_mask: (B, 9) bool, true where the timestamp is the learned null token.
    """

    frames: Tensor
    log_snr: Tensor
    timestamps: Tensor
    null_mask: Tensor

    def __post_init__(self):
        b, f = self.frames.shape[:2]
        for name, t in (("log_snr", self.log_snr), ("timestamps", self.timestamps),
                        ("null_mask", self.null_mask)):
            if t.shape != (b, f):
                raise ShapeError(f"{name} must be (batch, frames), got {tuple(t.shape)}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[1]


def assemble_input(
    cond: ConditioningPair,
    noisy: NoisyVideo,
    t: float | Tensor,
    schedule: LogSnrSchedule = DEFAULT_SCHEDULE,
) -> ModelInput:
    """Stack [start, z_1..z_7, end] with per-frame markers.

    Conditioning slots carry lambda_max (lambda_min when dropped) and
    timestamps 0/1 (null token when dropped); the noisy slots carry
    log_snr(t) and timestamps i/8.
    """
    z = noisy.z
    if z.ndim != 5 or z.shape[1] != FRAME_COUNT - 2:
        raise ShapeError(f"noisy stack must be (batch, 7, C, H, W), got {tuple(z.shape)}")
    if cond.start.shape != z[:, 0].shape:
        raise ShapeError(
            f"conditioning resolution {tuple(cond.start.shape)} does not match "
            f"noisy frames {tuple(z[:, 0].shape)}"
        )
    b = z.shape[0]
    frames = torch.cat([cond.start.unsqueeze(1), z, cond.end.unsqueeze(1)], dim=1)

    lam_t = log_snr(t, schedule)
    lam = torch.empty(b, FRAME_COUNT, dtype=z.dtype, device=z.device)
    if isinstance(lam_t, Tensor) and lam_t.ndim == 1:
        lam[:, GENERATED_SLOTS] = lam_t.to(dtype=z.dtype, device=z.device).view(-1, 1)
    else:
        lam[:, GENERATED_SLOTS] = float(lam_t)
    cond_lam = torch.where(
        cond.dropped, torch.tensor(schedule.lambda_min), torch.tensor(schedule.lambda_max)
    ).to(dtype=z.dtype, device=z.device)
    lam[:, 0] = cond_lam
    lam[:, 8] = cond_lam

    stamps = frame_timestamps().to(dtype=z.dtype, device=z.device).expand(b, FRAME_COUNT).clone()
    null_mask = torch.zeros(b, FRAME_COUNT, dtype=torch.bool, device=z.device)
    null_mask[:, 0] = cond.dropped
    null_mask[:, 8] = cond.dropped
    return ModelInput(frames=frames, log_snr=lam, timestamps=stamps, null_mask=null_mask)


def assemble_joint_input(
    noisy: NoisyVideo,
    t: float | Tensor,
    schedule: LogSnrSchedule = DEFAULT_SCHEDULE,
) -> ModelInput:
    """Input for the unconditional 9-frame model: every slot is noisy."""
    z = noisy.z
    if z.ndim != 5 or z.shape[1] != FRAME_COUNT:
        raise ShapeError(f"joint stack must be (batch, 9, C, H, W), got {tuple(z.shape)}")
    b = z.shape[0]
    lam_t = log_snr(t, schedule)
    if isinstance(lam_t, Tensor) and lam_t.ndim == 1:
        lam = lam_t.to(dtype=z.dtype, device=z.device).view(-1, 1).expand(b, FRAME_COUNT).clone()
    else:
        lam = torch.full((b, FRAME_COUNT), float(lam_t), dtype=z.dtype, device=z.device)
    stamps = frame_timestamps().to(dtype=z.dtype, device=z.device).expand(b, FRAME_COUNT).clone()
    null_mask = torch.zeros(b, FRAME_COUNT, dtype=torch.bool, device=z.device)
    return ModelInput(frames=z, log_snr=lam, timestamps=stamps, null_mask=null_mask)


def dropout_conditioning(
    cond: ConditioningPair, mask: Tensor, rng: torch.Generator
) -> ConditioningPair:
    """Replace the conditioning frames of masked examples with unit-Gaussian noise.

    Both frames of a pair are always dropped together.
    """
    if mask.shape != (cond.batch_size,):
        raise ShapeError("drop mask must be one bool per batch element")
    if bool((cond.dropped & mask).any()):
        raise StateError("conditioning already dropped")
    start, end = cond.start.clone(), cond.end.clone()
    noise = torch.randn(
        2, *cond.start.shape, generator=rng, dtype=cond.start.dtype, device=cond.start.device
    )
    start[mask] = noise[0][mask]
    end[mask] = noise[1][mask]
    return ConditioningPair(start=start, end=end, dropped=cond.dropped | mask)


def drop_conditioning(cond: ConditioningPair, rng: torch.Generator) -> ConditioningPair:
    """Drop the whole batch: Gaussian content, maximum noise level, null timestamps."""
    return dropout_conditioning(
        cond, torch.ones(cond.batch_size, dtype=torch.bool, device=cond.start.device), rng
    )


def noise_augment(
    low_res: Tensor,
    rng: torch.Generator | None = None,
    level: float | Tensor | None = None,
    schedule: LogSnrSchedule = DEFAULT_SCHEDULE,
) -> tuple[Tensor, float | Tensor]:
    """Noise conditioning augmentation for the SR stage.

    With level=None (training) draws per-example t_aug ~ U(0, 0.5); a fixed
    level is used at sampling time. level=0 is an exact no-op. Returns the
    augmented stack and the level so its embedding can condition the model.
    """
    if low_res.ndim != 5:
        raise ShapeError("low-res stack must be (batch, frames, C, H, W)")
    if level is None:
        if rng is None:
            raise ConfigError("rng is required when the augmentation level is drawn")
        level = 0.5 * torch.rand(
            low_res.shape[0], generator=rng, dtype=torch.float64, device=low_res.device
        )
    elif isinstance(level, Tensor):
        if not bool(((level >= 0) & (level <= 0.5)).all()):
            raise DomainError("augmentation level must lie in [0, 0.5]")
    else:
        level = float(level)
        if not 0.0 <= level <= 0.5:
            raise DomainError(f"augmentation level must lie in [0, 0.5], got {level}")
        if level == 0.0:
            return low_res, 0.0
    if rng is None:
        raise ConfigError("rng is required for a nonzero augmentation level")
    noise = torch.randn(
        low_res.shape, generator=rng, dtype=low_res.dtype, device=low_res.device
    )
    return forward_sample(low_res, level, noise, schedule).z, level


def sinusoidal_embedding(pos: Tensor, dim: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Standard sin/cos features of a scalar position, (..., dim)."""
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -torch.arange(half, dtype=torch.float64) * (math.log(10000.0) / max(half - 1, 1))
    ).to(device=pos.device)
    angles = pos.unsqueeze(-1).to(torch.float64) * freqs
    return torch.cat([angles.sin(), angles.cos()], dim=-1).to(dtype)


class FrameEmbedding(nn.Module):
    """Per-frame embedding: noise-level encoding plus timestamp encoding.

    Frames flagged in null_mask get a learned null vector in place of the
    timestamp encoding, so the unconditional branch never sees a timestamp.
    """

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2 != 0:
            raise ConfigError(f"embedding dim must be even, got {dim}")
        self.dim = dim
        self.null_token = nn.Parameter(torch.randn(dim) * 0.02)

    def forward(self, log_snr: Tensor, timestamps: Tensor, null_mask: Tensor) -> Tensor:
        dtype = self.null_token.dtype
        noise_emb = sinusoidal_embedding(log_snr * LOG_SNR_EMBED_SCALE, self.dim, dtype)
        time_emb = sinusoidal_embedding(timestamps, self.dim, dtype)
        time_emb = torch.where(null_mask.unsqueeze(-1), self.null_token, time_emb)
        return noise_emb + time_emb
