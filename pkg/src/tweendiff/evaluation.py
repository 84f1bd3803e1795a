"""Reconstruction metrics and the evaluation protocols.

PSNR/SSIM are computed on pixels mapped from [-1, 1] to [0, 1]. `evaluate`
scores a model (or cascade) over a split of stored clips, sampling once per
clip with a per-clip seed; the middle protocol scores only clip frame 4 (the
4th generated frame), all7 scores every generated frame. A small diversity
probe (across-sample pixel std) stands in for feature-based generative
metrics, whose report fields are reserved but left null.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .cascade import CascadeConfig, cascade_sample
from .conditioning import ConditioningPair
from .data import FRAME_COUNT, VideoClip, load_clip, read_manifest
from .errors import ConfigError, ShapeError, SizeError
from .resize import area_downsample
from .sampling import SamplerConfig, derive_seed, sample_video

logger = logging.getLogger(__name__)

MIDDLE = "middle"
ALL7 = "all7"
PROTOCOLS = (MIDDLE, ALL7)

MIDDLE_FRAME = 4  # clip index of the hardest target; generated index 3

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01) ** 2
SSIM_C2 = (0.03) ** 2


@dataclass
class MetricsRecord:
    clip_id: str
    protocol: str
    psnr: list[float]
    ssim: list[float]
    n_samples: int = 1
    # reserved for external feature-based scorers
    lpips: float | None = None
    fid: float | None = None
    fvd: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["psnr"] = ["inf" if math.isinf(v) else v for v in self.psnr]
        return json.dumps(d)


def _to_unit(frame) -> np.ndarray:
    arr = frame.detach().cpu().numpy() if torch.is_tensor(frame) else np.asarray(frame)
    return (arr.astype(np.float64) + 1.0) / 2.0


def psnr(pred, truth) -> float:
    """10*log10(1/MSE) over [0,1]-mapped pixels; +inf for identical frames."""
    a, b = _to_unit(pred), _to_unit(truth)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _windowed_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(img, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(pred, truth) -> float:
    """Mean local SSIM over valid window positions.

    Channels are collapsed to grayscale by the channel mean; the local window
    is an 11x11 Gaussian with sigma 1.5 and the stabilizers use L=1.
    """
    a, b = _to_unit(pred), _to_unit(truth)
    if a.shape != b.shape:
        raise ShapeError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a.mean(axis=0), b.mean(axis=0)
    if min(a.shape) < SSIM_WINDOW:
        raise SizeError(
            f"frame {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    kernel = _gaussian_kernel()
    mu_a = _windowed_mean(a, kernel)
    mu_b = _windowed_mean(b, kernel)
    var_a = _windowed_mean(a * a, kernel) - mu_a**2
    var_b = _windowed_mean(b * b, kernel) - mu_b**2
    cov = _windowed_mean(a * b, kernel) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def _clip_tensor(clip: VideoClip) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(clip.frames))


@dataclass
class EvalResult:
    records: list[MetricsRecord]
    skipped: int

    def aggregate(self) -> dict:
        """Mean psnr/ssim over clips (frame-averaged within each record)."""
        if not self.records:
            return {"n_clips": 0, "skipped": self.skipped, "psnr": None, "ssim": None}
        return {
            "n_clips": len(self.records),
            "skipped": self.skipped,
            "psnr": float(np.mean([np.mean(r.psnr) for r in self.records])),
            "ssim": float(np.mean([np.mean(r.ssim) for r in self.records])),
        }


def _sample_for_clips(
    model, clips: list[VideoClip], sampler: SamplerConfig, seeds: list[int],
    cascade_cfg: CascadeConfig | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample once per clip with a per-clip noise stream, batching the model
    forwards over the chunk. Returns (samples, ground-truth frames) at the
    model's resolution."""
    frames = torch.stack([_clip_tensor(c) for c in clips])
    if cascade_cfg is not None:
        base_model, sr_model = model
        target = sr_model.config.frame_size
    else:
        target = model.config.frame_size
    if frames.shape[-1] != target:
        factor = frames.shape[-1] // target
        if factor * target != frames.shape[-1]:
            raise ConfigError(
                f"clip resolution {frames.shape[-1]} not divisible down to model size {target}"
            )
        frames = area_downsample(frames, factor)
    pair = ConditioningPair.from_frames(frames[:, 0], frames[:, 8])
    if cascade_cfg is not None:
        samples = cascade_sample(base_model, sr_model, pair, cascade_cfg, seeds=seeds)
    else:
        samples = sample_video(model, pair, sampler, seeds=seeds)
    return samples, frames


def evaluate(
    model,
    split_dir: str | Path,
    protocol: str,
    sampler: SamplerConfig,
    cascade_cfg: CascadeConfig | None = None,
    base_seed: int = 0,
    max_clips: int | None = None,
    batch_size: int = 8,
) -> EvalResult:
    """Score a split of stored clips; returns per-clip records plus skip count.

    `model` is a single-stage model, or a (base, sr) tuple when cascade_cfg
    is given. Malformed clip directories are skipped with a logged warning.
    """
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    split_dir = Path(split_dir)
    manifest = split_dir / "manifest.txt"
    clip_dirs = read_manifest(manifest) if manifest.exists() else sorted(
        p for p in split_dir.iterdir() if p.is_dir()
    )
    if max_clips is not None:
        clip_dirs = clip_dirs[:max_clips]
    records: list[MetricsRecord] = []
    skipped = 0
    for chunk_start in range(0, len(clip_dirs), batch_size):
        chunk = clip_dirs[chunk_start : chunk_start + batch_size]
        clips, ids, seeds = [], [], []
        for d in chunk:
            try:
                clips.append(load_clip(d))
            except Exception as exc:  # malformed clip: skip, count, continue
                logger.warning("skipping malformed clip %s: %s", d, exc)
                skipped += 1
                continue
            ids.append(d.name)
            seeds.append(derive_seed(base_seed, f"clip:{d.name}"))
        if not clips:
            continue
        samples, truth = _sample_for_clips(model, clips, sampler, seeds, cascade_cfg)
        for i, cid in enumerate(ids):
            if protocol == MIDDLE:
                gen_idx = [MIDDLE_FRAME - 1]
            else:
                gen_idx = list(range(7))
            ps = [psnr(samples[i, g], truth[i, g + 1]) for g in gen_idx]
            ss = [ssim(samples[i, g], truth[i, g + 1]) for g in gen_idx]
            records.append(
                MetricsRecord(clip_id=cid, protocol=protocol, psnr=ps, ssim=ss)
            )
    return EvalResult(records=records, skipped=skipped)


def diversity_score(
    model,
    cond: ConditioningPair,
    n_samples: int,
    seed_base: int = 0,
    sampler: SamplerConfig | None = None,
    cascade_cfg: CascadeConfig | None = None,
    seeds: list[int] | None = None,
) -> np.ndarray:
    """Across-sample pixel standard deviation per generated frame index.

    Samples n_samples videos for one conditioning pair (seeds seed_base+i)
    and returns, per frame, the mean over pixels of the std over samples.
    """
    if n_samples < 2:
        raise ConfigError(f"diversity needs at least 2 samples, got {n_samples}")
    if cond.start.shape[0] != 1:
        raise ConfigError("diversity_score takes a single conditioning pair")
    sampler = sampler or SamplerConfig()
    rep = ConditioningPair(
        start=cond.start.expand(n_samples, *cond.start.shape[1:]),
        end=cond.end.expand(n_samples, *cond.end.shape[1:]),
        dropped=cond.dropped.expand(n_samples).clone(),
    )
    if seeds is None:
        seeds = [seed_base + i for i in range(n_samples)]
    elif len(seeds) != n_samples:
        raise ConfigError(f"got {len(seeds)} seeds for {n_samples} samples")
    if cascade_cfg is not None:
        base_model, sr_model = model
        stack = cascade_sample(base_model, sr_model, rep, cascade_cfg, seeds=seeds)
    else:
        stack = sample_video(model, rep, sampler, seeds=seeds)
    std = stack.std(dim=0, unbiased=False)  # (7, C, H, W)
    return std.mean(dim=(1, 2, 3)).cpu().numpy()


def write_metrics(result: EvalResult, path: str | Path, extra_summary: dict | None = None) -> Path:
    """Newline-delimited JSON: one record per clip plus a final summary record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in result.records:
            fh.write(rec.to_json() + "\n")
        summary = {"summary": True, **result.aggregate(), **(extra_summary or {})}
        summary = {
            k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
            for k, v in summary.items()
        }
        fh.write(json.dumps(summary) + "\n")
    return path
