"""Full sampling loops: classifier-free guidance, imputation, and
reconstruction guidance.

All modes share the same ancestral chain: start from unit Gaussian at t=1,
denoise, convert the v prediction to a clean estimate, clip to [-1, 1], apply
the mode-specific correction, and step back with the posterior transition.
The final step returns the posterior mean. Outputs are always the 7 generated
frames; the unconditional 9-frame baseline has its endpoint slots discarded.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import torch
from torch import Tensor

from .conditioning import (
    COND_SLOTS,
    FRAME_COUNT,
    GENERATED_SLOTS,
    ConditioningPair,
    assemble_input,
    assemble_joint_input,
)
from .diffusion import (
    DEFAULT_SCHEDULE,
    LogSnrSchedule,
    NoisyVideo,
    alpha_sigma,
    ancestral_step,
    log_snr,
    sampling_grid,
    x_from_v,
)
from .errors import ConfigError, DomainError, ModeError, ShapeError

CFG = "cfg"
IMPUTATION = "imputation"
RECON_GUIDANCE = "recon_guidance"
MODES = (CFG, IMPUTATION, RECON_GUIDANCE)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 256
    mode: str = CFG
    guidance_weight: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == CFG and self.guidance_weight < 0:
            raise DomainError(f"cfg guidance weight must be >= 0, got {self.guidance_weight}")
        if self.mode == RECON_GUIDANCE and self.guidance_weight < 1:
            raise DomainError(
                f"reconstruction guidance weight must be >= 1, got {self.guidance_weight}"
            )


def derive_seed(seed: int, tag: str) -> int:
    """Stable sub-stream seed for a named purpose (process-independent)."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def cfg_combine(v_cond: Tensor, v_uncond: Tensor, w: float) -> Tensor:
    """v_uncond + w*(v_cond - v_uncond); w=1 and w=0 return the inputs exactly."""
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(
            f"prediction shapes differ: {tuple(v_cond.shape)} vs {tuple(v_uncond.shape)}"
        )
    if w == 1.0:
        return v_cond
    if w == 0.0:
        return v_uncond
    return v_uncond + w * (v_cond - v_uncond)


def impute_replace(x_hat_9: Tensor, cond: ConditioningPair) -> Tensor:
    """Overwrite the endpoint slots of a 9-frame clean estimate with the
    conditioning frames; inner slots are untouched."""
    if x_hat_9.ndim != 5 or x_hat_9.shape[1] != FRAME_COUNT:
        raise ModeError(
            f"imputation operates on a 9-frame estimate, got {tuple(x_hat_9.shape)}"
        )
    out = x_hat_9.clone()
    out[:, COND_SLOTS[0]] = cond.start
    out[:, COND_SLOTS[1]] = cond.end
    return out


def recon_guided_xhat(
    x_hat_9: Tensor,
    z_t: Tensor,
    cond: ConditioningPair,
    w: float,
    lam: float,
) -> Tensor:
    """Reconstruction-guided estimate for the inpainting baseline.

    Takes the raw 9-frame estimate (still attached to the autograd graph of
    z_t), pulls it toward agreement between the predicted and true endpoint
    frames, then overwrites the endpoints:

        guided = inpaint(clip(x_hat)) - (w-1) * (alpha_t/2) * grad_z ||c - c_hat||^2

    w=1 is plain imputation and computes no gradient.
    """
    if w < 1:
        raise DomainError(f"reconstruction guidance weight must be >= 1, got {w}")
    if x_hat_9.ndim != 5 or x_hat_9.shape[1] != FRAME_COUNT:
        raise ModeError(
            f"reconstruction guidance operates on a 9-frame estimate, got {tuple(x_hat_9.shape)}"
        )
    if w > 1:
        if not z_t.requires_grad:
            raise ConfigError("z_t must require grad for reconstruction guidance")
        c_hat = torch.stack([x_hat_9[:, COND_SLOTS[0]], x_hat_9[:, COND_SLOTS[1]]], dim=1)
        c_true = torch.stack([cond.start, cond.end], dim=1).to(c_hat.dtype)
        sq_err = (c_true - c_hat).pow(2).sum()
        (grad,) = torch.autograd.grad(sq_err, z_t)
    alpha_t, _ = alpha_sigma(lam)
    guided = impute_replace(x_hat_9.detach().clamp(-1.0, 1.0), cond)
    if w > 1:
        guided = guided - (w - 1) * (alpha_t / 2.0) * grad
    return guided


def _check_mode(model, cfg: SamplerConfig) -> None:
    conditional = model.config.conditional
    if cfg.mode == CFG and not conditional:
        raise ModeError("cfg sampling requires a frame-conditioned model")
    if cfg.mode in (IMPUTATION, RECON_GUIDANCE) and conditional:
        raise ModeError(f"{cfg.mode} sampling requires the unconditional 9-frame model")
    if (
        cfg.mode == CFG
        and cfg.guidance_weight != 1.0
        and not getattr(model, "trained_with_conditioning_dropout", True)
    ):
        warnings.warn(
            "cfg with weight != 1 on a model trained without conditioning dropout: "
            "the unconditional branch is untrained",
            stacklevel=3,
        )


class _NoiseStreams:
    """One generator per batch element so draws don't depend on batch peers."""

    def __init__(self, seeds: list[int], tag: str, device):
        self.gens = [
            torch.Generator(device).manual_seed(derive_seed(s, tag)) for s in seeds
        ]
        self.device = device

    def randn(self, per_item_shape: tuple[int, ...]) -> Tensor:
        return torch.cat(
            [
                torch.randn(1, *per_item_shape, generator=g, device=self.device)
                for g in self.gens
            ],
            dim=0,
        )


def sample_video(
    model,
    cond: ConditioningPair,
    cfg: SamplerConfig,
    schedule: LogSnrSchedule = DEFAULT_SCHEDULE,
    low_res_cond: Tensor | None = None,
    aug_level: float | Tensor | None = None,
    seeds: list[int] | None = None,
) -> Tensor:
    """Run the full ancestral chain and return the 7 generated frames.

    Deterministic given (seed, cond, model parameters). The chain noise and
    the null-conditioning content come from independent derived streams, so
    guidance weight does not perturb the trajectory noise. `seeds` gives each
    batch element its own stream (defaults to cfg.seed for all).
    """
    _check_mode(model, cfg)
    device = cond.start.device
    b, c, h, w_px = cond.start.shape
    if seeds is None:
        seeds = [cfg.seed] * b
    if len(seeds) != b:
        raise ShapeError(f"got {len(seeds)} seeds for a batch of {b}")
    chain = _NoiseStreams(seeds, "chain", device)
    null_stream = _NoiseStreams(seeds, "null", device)

    conditional = model.config.conditional
    n_noisy = FRAME_COUNT - 2 if conditional else FRAME_COUNT
    null_pair = None
    if cfg.mode == CFG:
        null_noise = null_stream.randn((2, c, h, w_px))
        null_pair = ConditioningPair(
            start=null_noise[:, 0],
            end=null_noise[:, 1],
            dropped=torch.ones(b, dtype=torch.bool, device=device),
        )

    z = chain.randn((n_noisy, c, h, w_px))
    w = cfg.guidance_weight
    for t, s in sampling_grid(cfg.steps):
        lam = log_snr(t, schedule)
        if cfg.mode == CFG:
            with torch.no_grad():
                inp = assemble_input(cond, NoisyVideo(z, _per_frame(z, lam)), t, schedule)
                v = model(inp, low_res_cond, aug_level)
                if w != 1.0:
                    null_inp = assemble_input(
                        null_pair, NoisyVideo(z, _per_frame(z, lam)), t, schedule
                    )
                    v = cfg_combine(v, model(null_inp, low_res_cond, aug_level), w)
            x_hat = x_from_v(z, v, lam).clamp(-1.0, 1.0)
        elif cfg.mode == IMPUTATION:
            with torch.no_grad():
                inp = assemble_joint_input(NoisyVideo(z, _per_frame(z, lam)), t, schedule)
                v = model(inp, low_res_cond, aug_level)
            x_hat = impute_replace(x_from_v(z, v, lam).clamp(-1.0, 1.0), cond)
        else:  # reconstruction guidance
            if w > 1.0:
                with torch.enable_grad():
                    z_req = z.detach().requires_grad_(True)
                    inp = assemble_joint_input(NoisyVideo(z_req, _per_frame(z, lam)), t, schedule)
                    v = model(inp, low_res_cond, aug_level)
                    x_raw = x_from_v(z_req, v, lam)
                    x_hat = recon_guided_xhat(x_raw, z_req, cond, w, lam)
            else:
                with torch.no_grad():
                    inp = assemble_joint_input(NoisyVideo(z, _per_frame(z, lam)), t, schedule)
                    v = model(inp, low_res_cond, aug_level)
                x_hat = recon_guided_xhat(x_from_v(z, v, lam), z, cond, w, lam)
        if s == 0.0:
            z = ancestral_step(z, x_hat, t, s, schedule=schedule)
        else:
            z = ancestral_step(z, x_hat, t, s, chain.randn(z.shape[1:]), schedule)
    out = z.clamp(-1.0, 1.0)
    return out if conditional else out[:, GENERATED_SLOTS]


def _per_frame(z: Tensor, lam: float) -> Tensor:
    return torch.full(z.shape[:2], float(lam), dtype=z.dtype, device=z.device)
