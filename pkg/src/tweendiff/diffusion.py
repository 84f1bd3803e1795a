"""Continuous-time diffusion core.

Noise schedule, forward process, v-prediction algebra, loss weighting, and
the single ancestral transition. Everything here is a pure function; schedule
and coefficient math runs in double precision regardless of the dtype of the
frame tensors it gets applied to.

Conventions: t in [0,1] with t=0 clean and t=1 pure noise; lambda is the
log signal-to-noise ratio, large lambda meaning nearly clean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import torch
from torch import Tensor

from .errors import DomainError, OrderingError, ShapeError

Scalar = Union[float, Tensor]


@dataclass(frozen=True)
class LogSnrSchedule:
    """Cosine log-SNR schedule pinned to lambda(0)=lambda_max, lambda(1)=lambda_min.

    lambda(t) = -2*log(tan(theta(t))) with theta interpolated linearly between
    arctan(exp(-lambda_max/2)) and arctan(exp(-lambda_min/2)). Strictly
    decreasing, and lambda(0.5)=0 for symmetric endpoints.
    """

    lambda_max: float = 20.0
    lambda_min: float = -20.0

    def __post_init__(self):
        if not (self.lambda_max > self.lambda_min):
            raise DomainError(
                f"lambda_max ({self.lambda_max}) must exceed lambda_min ({self.lambda_min})"
            )

    @property
    def theta_min(self) -> float:
        return math.atan(math.exp(-0.5 * self.lambda_max))

    @property
    def theta_max(self) -> float:
        return math.atan(math.exp(-0.5 * self.lambda_min))


DEFAULT_SCHEDULE = LogSnrSchedule()


class AlphaSigma(NamedTuple):
    """Signal/noise scales at one log-SNR; alpha^2 + sigma^2 = 1."""

    alpha: Scalar
    sigma: Scalar


def log_snr(t: Scalar, schedule: LogSnrSchedule = DEFAULT_SCHEDULE) -> Scalar:
    """Map time t in [0,1] to log-SNR. Accepts a float or a tensor of times."""
    tmin, tmax = schedule.theta_min, schedule.theta_max
    if isinstance(t, Tensor):
        if not torch.isfinite(t).all() or bool((t < 0).any()) or bool((t > 1).any()):
            raise DomainError("t must lie in [0, 1]")
        theta = tmin + t.to(torch.float64) * (tmax - tmin)
        return -2.0 * torch.log(torch.tan(theta))
    t = float(t)
    if not math.isfinite(t) or t < 0.0 or t > 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    theta = tmin + t * (tmax - tmin)
    return -2.0 * math.log(math.tan(theta))


def alpha_sigma(lam: Scalar) -> AlphaSigma:
    """alpha = sqrt(sigmoid(lambda)), sigma = sqrt(sigmoid(-lambda))."""
    if isinstance(lam, Tensor):
        if not torch.isfinite(lam).all():
            raise DomainError("log-SNR must be finite")
        lam64 = lam.to(torch.float64)
        return AlphaSigma(torch.sigmoid(lam64).sqrt(), torch.sigmoid(-lam64).sqrt())
    lam = float(lam)
    if not math.isfinite(lam):
        raise DomainError(f"log-SNR must be finite, got {lam}")
    alpha = math.sqrt(1.0 / (1.0 + math.exp(-lam)))
    sigma = math.sqrt(1.0 / (1.0 + math.exp(lam)))
    return AlphaSigma(alpha, sigma)


def loss_weight(lam: Scalar) -> Scalar:
    """exp(lambda/2); turns the x-space L1 error into the eps-space L1 error."""
    if isinstance(lam, Tensor):
        if not torch.isfinite(lam).all():
            raise DomainError("log-SNR must be finite")
        return torch.exp(lam.to(torch.float64) / 2.0)
    lam = float(lam)
    if not math.isfinite(lam):
        raise DomainError(f"log-SNR must be finite, got {lam}")
    return math.exp(lam / 2.0)


@dataclass
class NoisyVideo:
    """Noised frame stack plus the log-SNR each frame was noised at.

    z has the same shape as the clean frames it came from, laid out
    (batch, frames, ...). per_frame_log_snr is (batch, frames).
    """

    z: Tensor
    per_frame_log_snr: Tensor

    def __post_init__(self):
        if self.per_frame_log_snr.shape != self.z.shape[:2]:
            raise ShapeError(
                f"per_frame_log_snr {tuple(self.per_frame_log_snr.shape)} does not match "
                f"leading dims of z {tuple(self.z.shape)}"
            )


def _coeffs(lam: Scalar, like: Tensor) -> tuple[Tensor, Tensor]:
    """alpha/sigma for lam, shaped to broadcast against `like` and cast to its dtype.

    lam may be a float, or a tensor whose shape is a leading prefix of
    like.shape (typically (B,) or (B, F)).
    """
    alpha, sigma = alpha_sigma(lam)
    if isinstance(alpha, Tensor):
        if alpha.shape != like.shape[: alpha.ndim]:
            raise ShapeError(
                f"log-SNR shape {tuple(alpha.shape)} is not a leading prefix of "
                f"frame shape {tuple(like.shape)}"
            )
        extra = like.ndim - alpha.ndim
        alpha = alpha.view(*alpha.shape, *([1] * extra)).to(like.dtype)
        sigma = sigma.view(*sigma.shape, *([1] * extra)).to(like.dtype)
    return alpha, sigma


def _check_same_shape(a: Tensor, b: Tensor, names: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{names} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_sample(
    x: Tensor,
    t: Scalar,
    noise: Tensor,
    schedule: LogSnrSchedule = DEFAULT_SCHEDULE,
) -> NoisyVideo:
    """Diffuse clean frames to time t: z = alpha*x + sigma*noise.

    x and noise are (batch, frames, ...); t is a float applied to the whole
    batch or a (batch,) tensor of per-example times.
    """
    _check_same_shape(x, noise, "x and noise")
    if x.ndim < 2:
        raise ShapeError("frames must be laid out (batch, frames, ...)")
    lam = log_snr(t, schedule)
    alpha, sigma = _coeffs(lam, x)
    z = alpha * x + sigma * noise
    if isinstance(lam, Tensor) and lam.ndim == 1:
        per_frame = lam.to(dtype=x.dtype, device=x.device).view(-1, 1).expand(*x.shape[:2]).clone()
    else:
        per_frame = torch.full(x.shape[:2], float(lam), dtype=x.dtype, device=x.device)
    return NoisyVideo(z=z, per_frame_log_snr=per_frame)


def v_target(x: Tensor, eps: Tensor, lam: Scalar) -> Tensor:
    """Training target v = alpha*eps - sigma*x."""
    _check_same_shape(x, eps, "x and eps")
    alpha, sigma = _coeffs(lam, x)
    return alpha * eps - sigma * x


def x_from_v(z: Tensor, v: Tensor, lam: Scalar) -> Tensor:
    """Clean-frame estimate alpha*z - sigma*v; exact inverse when v is the true target."""
    _check_same_shape(z, v, "z and v")
    alpha, sigma = _coeffs(lam, z)
    return alpha * z - sigma * v


def eps_from_v(z: Tensor, v: Tensor, lam: Scalar) -> Tensor:
    """Noise estimate sigma*z + alpha*v; consistent with z = alpha*x + sigma*eps."""
    _check_same_shape(z, v, "z and v")
    alpha, sigma = _coeffs(lam, z)
    return sigma * z + alpha * v


def ancestral_step(
    z_t: Tensor,
    x_hat: Tensor,
    t: float,
    s: float,
    noise: Tensor | None = None,
    schedule: LogSnrSchedule = DEFAULT_SCHEDULE,
) -> Tensor:
    """One reverse transition z_t -> z_s using the exact Gaussian posterior
    q(z_s | z_t, x = x_hat) with the minimal ("posterior") variance.

    At s=0 the mean is returned and `noise` is ignored.
    """
    _check_same_shape(z_t, x_hat, "z_t and x_hat")
    if not (0.0 <= s < t <= 1.0):
        raise OrderingError(f"need 0 <= s < t <= 1, got s={s}, t={t}")
    a_t, sg_t = alpha_sigma(log_snr(t, schedule))
    a_s, sg_s = alpha_sigma(log_snr(s, schedule))
    r = a_t / a_s  # alpha_{t|s}
    var_ts = max(sg_t * sg_t - r * r * sg_s * sg_s, 0.0)
    var_t = sg_t * sg_t
    mean = (r * sg_s * sg_s / var_t) * z_t + (a_s * var_ts / var_t) * x_hat
    if s == 0.0:
        return mean
    if noise is None:
        raise DomainError("noise is required for every step except the final one (s=0)")
    _check_same_shape(z_t, noise, "z_t and noise")
    std = math.sqrt(var_ts * sg_s * sg_s / var_t)
    return mean + std * noise


def sampling_grid(steps: int) -> list[tuple[float, float]]:
    """Uniform (t, s) pairs covering [1, 0] in `steps` transitions."""
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    times = [i / steps for i in range(steps, -1, -1)]
    return list(zip(times[:-1], times[1:]))
