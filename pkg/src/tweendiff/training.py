"""Loss, optimization loop, EMA, and checkpointing for both stages.

The training stream is synthetic and generated on the fly; every example is
a pure function of (global seed, example index), so runs are reproducible
and resumable bit-for-bit. Checkpoints are plain .npz archives of named
float arrays plus a JSON metadata record (see `save_checkpoint`).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .conditioning import (
    ConditioningPair,
    assemble_input,
    assemble_joint_input,
    dropout_conditioning,
    noise_augment,
)
from .diffusion import DEFAULT_SCHEDULE, forward_sample, loss_weight, x_from_v
from .errors import ConfigError, ShapeError, TrainingDivergence
from .model import SUPER_RESOLUTION, ModelConfig, VideoUNet
from .resize import area_downsample
from .data import training_clip

CHECKPOINT_FORMAT_VERSION = 1

BASE_STAGE = "base"
SR_STAGE = "sr"


@dataclass(frozen=True)
class TrainConfig:
    stage: str = BASE_STAGE
    learning_rate: float = 5e-4
    warmup_steps: int = 10_000
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip_norm: float = 1.0
    ema_decay: float = 0.9999
    batch_size: int = 8
    total_steps: int = 20_000
    cfg_drop_prob: float = 0.1
    seed: int = 0
    dataset_size: int = 50_000
    data_resolution: int = 64
    log_every: int = 50
    checkpoint_every: int = 1_000

    def __post_init__(self):
        if self.stage not in (BASE_STAGE, SR_STAGE):
            raise ConfigError(f"unknown stage {self.stage!r}")
        for name in (
            "learning_rate",
            "warmup_steps",
            "beta1",
            "beta2",
            "grad_clip_norm",
            "ema_decay",
            "batch_size",
            "total_steps",
            "dataset_size",
            "data_resolution",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.cfg_drop_prob < 1.0:
            raise ConfigError(f"cfg_drop_prob must lie in [0, 1), got {self.cfg_drop_prob}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def ema_update(shadow: dict[str, Tensor], model: nn.Module, decay: float) -> None:
    """shadow <- decay*shadow + (1-decay)*params, in place."""
    params = dict(model.named_parameters())
    if set(shadow) != set(params):
        raise ShapeError("EMA shadow does not match the model's parameter names")
    with torch.no_grad():
        for name, p in params.items():
            if shadow[name].shape != p.shape:
                raise ShapeError(f"EMA shadow shape mismatch for {name}")
            shadow[name].mul_(decay).add_(p, alpha=1.0 - decay)


def init_ema(model: nn.Module) -> dict[str, Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def training_loss(
    clips: Tensor,
    model: VideoUNet,
    rng: torch.Generator,
    cfg_drop_prob: float,
    schedule=DEFAULT_SCHEDULE,
) -> tuple[Tensor, dict]:
    """Weighted x-space L1 on one batch of 9-frame clips.

    Per example: split into conditioning and target frames, maybe drop the
    conditioning, diffuse the targets to a uniform random time, and score
    exp(lambda/2) * mean|x_hat - x|. Thanks to the conversion algebra this
    equals the eps-space L1. The SR stage additionally noise-augments the
    low-res conditioning derived from the target frames.
    """
    if clips.ndim != 5 or clips.shape[1] != 9:
        raise ShapeError(f"expected (B, 9, C, H, W) clips, got {tuple(clips.shape)}")
    cfg = model.config
    if clips.shape[-1] != cfg.frame_size:
        raise ConfigError(
            f"clip resolution {clips.shape[-1]} does not match model stage ({cfg.frame_size})"
        )
    b = clips.shape[0]
    t = torch.rand(b, generator=rng, dtype=torch.float64, device=clips.device)

    if cfg.conditional:
        x = clips[:, 1:8]
        cond = ConditioningPair.from_frames(clips[:, 0], clips[:, 8])
        if cfg_drop_prob > 0:
            mask = (
                torch.rand(b, generator=rng, device=clips.device) < cfg_drop_prob
            )
            cond = dropout_conditioning(cond, mask, rng)
        eps = torch.randn(x.shape, generator=rng, device=clips.device)
        noisy = forward_sample(x, t, eps, schedule)
        inp = assemble_input(cond, noisy, t, schedule)
    else:
        x = clips
        eps = torch.randn(x.shape, generator=rng, device=clips.device)
        noisy = forward_sample(x, t, eps, schedule)
        inp = assemble_joint_input(noisy, t, schedule)

    if cfg.variant == SUPER_RESOLUTION:
        factor = 2
        low = area_downsample(clips[:, 1:8], factor)
        low_aug, t_aug = noise_augment(low, rng, schedule=schedule)
        v = model(inp, low_res_cond=low_aug, aug_level=t_aug)
    else:
        v = model(inp)

    lam = noisy.per_frame_log_snr[:, 0].to(torch.float64)
    x_hat = x_from_v(noisy.z, v, lam.to(noisy.z.dtype))
    per_example = (x_hat - x).abs().mean(dim=(1, 2, 3, 4))
    weights = loss_weight(lam).to(per_example.dtype)
    loss = (weights * per_example).mean()
    stats = {"lambda": lam.tolist(), "t": t.tolist()}
    return loss, stats


@dataclass
class TrainState:
    model: VideoUNet
    optimizer: torch.optim.Adam
    ema: dict[str, Tensor]
    rng: torch.Generator
    config: TrainConfig
    step: int = 0


def make_train_state(model: VideoUNet, config: TrainConfig) -> TrainState:
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    rng = torch.Generator().manual_seed(config.seed)
    return TrainState(
        model=model, optimizer=optimizer, ema=init_ema(model), rng=rng, config=config
    )


def effective_lr(config: TrainConfig, step: int) -> float:
    return config.learning_rate * min(1.0, step / config.warmup_steps)


def train_step(state: TrainState, clips: Tensor, batch_ids=None) -> dict:
    """One optimization step: loss, clip to unit global norm, warmed-up Adam
    update, EMA update. Raises TrainingDivergence on a non-finite loss."""
    cfg = state.config
    state.model.train()
    loss, stats = training_loss(clips, state.model, state.rng, cfg.cfg_drop_prob)
    if not torch.isfinite(loss):
        raise TrainingDivergence(
            state.step,
            f"non-finite loss; lambda draws {stats['lambda']}, batch ids "
            f"{list(batch_ids) if batch_ids is not None else 'unknown'}",
        )
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(
        state.model.parameters(), cfg.grad_clip_norm
    )
    lr = effective_lr(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    ema_update(state.ema, state.model, cfg.ema_decay)
    state.step += 1
    return {
        "step": state.step,
        "loss": float(loss.detach()),
        "lr": lr,
        "grad_norm": float(grad_norm),
    }


def _batch_clips(config: TrainConfig, ids: Tensor, target_size: int) -> Tensor:
    res = config.data_resolution
    clips = np.stack(
        [training_clip(config.seed, int(i), resolution=res).frames for i in ids]
    )
    batch = torch.from_numpy(clips)
    if res != target_size:
        if res % target_size:
            raise ConfigError(
                f"data resolution {res} is not a multiple of the model size {target_size}"
            )
        batch = area_downsample(batch, res // target_size)
    return batch


def run_training(
    model: VideoUNet,
    config: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    log_hook=None,
) -> Path:
    """Train to config.total_steps, logging JSONL and checkpointing periodically.

    Returns the path of the final checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = make_train_state(model, config)
    if resume_from is not None:
        restore_train_state(state, resume_from)
    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "checkpoint.npz"
    t_start = time.time()
    with log_path.open("a") as log:
        while state.step < config.total_steps:
            ids = torch.randint(
                0, config.dataset_size, (config.batch_size,), generator=state.rng
            )
            batch = _batch_clips(config, ids, model.config.frame_size)
            record = train_step(state, batch, batch_ids=ids.tolist())
            record["wall_time"] = round(time.time() - t_start, 3)
            if state.step % config.log_every == 0 or state.step == config.total_steps:
                log.write(json.dumps(record) + "\n")
                log.flush()
            if log_hook is not None:
                log_hook(record)
            if state.step % config.checkpoint_every == 0 or state.step == config.total_steps:
                save_checkpoint(ckpt_path, state)
    save_checkpoint(ckpt_path, state)
    return ckpt_path


def config_hash(model_config: ModelConfig, train_config: TrainConfig) -> str:
    import hashlib

    blob = json.dumps(
        {"model": model_config.to_dict(), "train": asdict(train_config)}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, state: TrainState) -> Path:
    """Checkpoint container: an .npz of named arrays plus a JSON `meta` entry.

    Keys: param/<name> and ema/<name> (one array per parameter, row-major),
    adam/<name>/{exp_avg,exp_avg_sq,step}, rng/{train,torch_global} (uint8
    generator states), meta (JSON: step, configs, config hash, format version).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    params = dict(state.model.named_parameters())
    for name, p in params.items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
        arrays[f"ema/{name}"] = state.ema[name].cpu().numpy()
    opt_state = state.optimizer.state
    for name, p in params.items():
        st = opt_state.get(p)
        if st:
            arrays[f"adam/{name}/exp_avg"] = st["exp_avg"].cpu().numpy()
            arrays[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"].cpu().numpy()
            arrays[f"adam/{name}/step"] = np.asarray(float(st["step"]))
    arrays["rng/train"] = state.rng.get_state().numpy()
    arrays["rng/torch_global"] = torch.get_rng_state().numpy()
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "model_config": state.model.config.to_dict(),
        "train_config": asdict(state.config),
        "config_hash": config_hash(state.model.config, state.config),
        "ema_decay": state.config.ema_decay,
    }
    arrays["meta"] = np.asarray(json.dumps(meta))
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint into {params, ema, adam, rng, meta} dicts of tensors."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        out = {"params": {}, "ema": {}, "adam": {}, "meta": meta, "rng": {}}
        for key in z.files:
            if key.startswith("param/"):
                out["params"][key[len("param/"):]] = torch.from_numpy(z[key])
            elif key.startswith("ema/"):
                out["ema"][key[len("ema/"):]] = torch.from_numpy(z[key])
            elif key.startswith("adam/"):
                out["adam"][key[len("adam/"):]] = torch.from_numpy(z[key])
            elif key.startswith("rng/"):
                out["rng"][key[len("rng/"):]] = torch.from_numpy(z[key])
    return out


def restore_train_state(state: TrainState, path: str | Path) -> None:
    """Restore params, EMA, Adam moments, step and rng cursors in place."""
    bundle = load_checkpoint(path)
    params = dict(state.model.named_parameters())
    if set(params) != set(bundle["params"]):
        raise ShapeError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(bundle["params"][name])
            state.ema[name].copy_(bundle["ema"][name])
    for name, p in params.items():
        key = f"{name}/exp_avg"
        if key in bundle["adam"]:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(bundle["adam"][f"{name}/step"])),
                "exp_avg": bundle["adam"][key].clone(),
                "exp_avg_sq": bundle["adam"][f"{name}/exp_avg_sq"].clone(),
            }
    state.rng.set_state(bundle["rng"]["train"].to(torch.uint8))
    torch.set_rng_state(bundle["rng"]["torch_global"].to(torch.uint8))
    state.step = bundle["meta"]["step"]


def load_model(path: str | Path, use_ema: bool = True) -> VideoUNet:
    """Build a model from a checkpoint; evaluation defaults to the EMA shadow."""
    bundle = load_checkpoint(path)
    model = VideoUNet(ModelConfig.from_dict(bundle["meta"]["model_config"]))
    source = bundle["ema"] if use_ema else bundle["params"]
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(source[name])
    model.eval()
    model.trained_with_conditioning_dropout = (
        bundle["meta"]["train_config"].get("cfg_drop_prob", 0.0) > 0
    )
    return model