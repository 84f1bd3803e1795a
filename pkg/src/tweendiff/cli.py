"""Operator CLI: dataset generation, training, sampling, evaluation, and the
conditioning-ablation sweep.

Every command takes an optional YAML config plus repeatable --set overrides
(dotted keys, YAML-parsed values) and freezes its resolved config and run
metadata next to its outputs. Exit codes: 0 success, 1 usage or config
error, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .cascade import CascadeConfig
from .conditioning import ConditioningPair
from .configio import freeze_run_config, resolve_config
from .data import (
    AMBIGUOUS_SPLIT,
    LINEAR_SPLIT,
    TRAIN_SPLIT,
    VideoClip,
    load_clip,
    make_dataset,
    save_clip,
)
from .errors import TweendiffError
from .evaluation import diversity_score, evaluate, write_metrics
from .model import ModelConfig, VideoUNet, desk_base_config, desk_sr_config
from .sampling import CFG, IMPUTATION, MODES, RECON_GUIDANCE, SamplerConfig, sample_video
from .training import TrainConfig, load_model, run_training

# sweep grids for the conditioning ablation
RECON_WEIGHT_GRID = (1.0, 3.0, 7.0, 14.0, 27.0)
CFG_WEIGHT_GRID = (0.0, 1.0, 2.0, 4.0)


@click.group()
def cli():
    """Cascaded diffusion video in-betweening."""


def _common(f):
    f = click.option("--config", "config_file", type=click.Path(exists=True), default=None,
                     help="YAML config file.")(f)
    f = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                     help="Override a config key (dotted path, YAML value).")(f)
    f = click.option("--out", "out_dir", required=True, type=click.Path(), help="Artifact directory.")(f)
    return f


MAKE_DATA_DEFAULTS = {
    "seed": 0,
    "resolution": 64,
    "train_clips": 50_000,
    "eval_clips": 400,
    "write_train_clips": 0,  # training streams synthetically; >0 materializes clips
}


@cli.command("make-data")
@_common
def make_data(config_file, sets, out_dir):
    """Write evaluation splits (and optionally training clips) as clip dirs."""
    cfg = resolve_config(MAKE_DATA_DEFAULTS, config_file, sets)
    freeze_run_config(out_dir, "make-data", cfg, cfg["seed"])
    for split, n in (
        (LINEAR_SPLIT, cfg["eval_clips"]),
        (AMBIGUOUS_SPLIT, cfg["eval_clips"]),
        (TRAIN_SPLIT, cfg["write_train_clips"]),
    ):
        if n > 0:
            manifest = make_dataset(out_dir, split, n, cfg["seed"], cfg["resolution"])
            click.echo(f"{split}: {n} clips, manifest {manifest}")


def _train_defaults(stage: str) -> dict:
    model = desk_base_config() if stage == "base" else desk_sr_config()
    train = TrainConfig(stage=stage, total_steps=20_000 if stage == "base" else 10_000)
    d = train.__dict__.copy()
    return {"model": model.to_dict(), "train": d}


def _run_train(stage, config_file, sets, out_dir, resume):
    cfg = resolve_config(_train_defaults(stage), config_file, sets)
    train_cfg = TrainConfig.from_dict({**cfg["train"], "stage": stage})
    model_cfg = ModelConfig.from_dict(cfg["model"])
    freeze_run_config(out_dir, f"train-{stage}", cfg, train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    model = VideoUNet(model_cfg)
    ckpt = run_training(model, train_cfg, out_dir, resume_from=resume)
    click.echo(f"checkpoint: {ckpt}")


@cli.command("train-base")
@_common
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="Checkpoint to resume from.")
def train_base(config_file, sets, out_dir, resume):
    """Train the base (32px) stage; use --set model.conditional=false for the
    unconditional 9-frame ablation model."""
    _run_train("base", config_file, sets, out_dir, resume)


@cli.command("train-sr")
@_common
@click.option("--resume", type=click.Path(exists=True), default=None)
def train_sr(config_file, sets, out_dir, resume):
    """Train the super-resolution (32->64) stage."""
    _run_train("sr", config_file, sets, out_dir, resume)


SAMPLE_DEFAULTS = {
    "steps": 256,
    "mode": CFG,
    "guidance_weight": 2.0,
    "seed": 0,
    "sr_steps": 256,
    "sr_guidance_weight": 2.0,
    "sr_aug_level": 0.1,
}


@cli.command("sample")
@_common
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--sr-checkpoint", type=click.Path(exists=True), default=None,
              help="Run the full cascade with this SR checkpoint.")
@click.option("--clip", "clip_dir", required=True, type=click.Path(exists=True),
              help="Clip directory supplying the start/end frames.")
def sample(config_file, sets, out_dir, checkpoint, sr_checkpoint, clip_dir):
    """Generate the 7 in-between frames for one clip's endpoints."""
    cfg = resolve_config(SAMPLE_DEFAULTS, config_file, sets)
    freeze_run_config(out_dir, "sample", cfg, cfg["seed"])
    model = load_model(checkpoint)
    clip = load_clip(clip_dir)
    frames = torch.from_numpy(clip.frames)
    sampler = SamplerConfig(
        steps=cfg["steps"], mode=cfg["mode"],
        guidance_weight=cfg["guidance_weight"], seed=cfg["seed"],
    )
    if sr_checkpoint:
        from .cascade import cascade_sample

        sr_model = load_model(sr_checkpoint)
        pair = ConditioningPair.from_frames(frames[0:1], frames[8:9])
        out = cascade_sample(
            model, sr_model, pair,
            CascadeConfig(
                base_sampler=sampler,
                sr_sampler=SamplerConfig(
                    steps=cfg["sr_steps"], guidance_weight=cfg["sr_guidance_weight"],
                    seed=cfg["seed"],
                ),
                sr_aug_level=cfg["sr_aug_level"],
            ),
        )
        cond_for_output = pair
    else:
        size = model.config.frame_size
        if clip.resolution != size:
            from .resize import area_downsample

            frames = area_downsample(frames, clip.resolution // size)
        pair = ConditioningPair.from_frames(frames[0:1], frames[8:9])
        out = sample_video(model, pair, sampler)
        cond_for_output = pair
    stack = torch.cat(
        [cond_for_output.start, out[0], cond_for_output.end], dim=0
    ).numpy()
    save_clip(VideoClip(frames=np.clip(stack, -1.0, 1.0), meta={"seed": cfg["seed"]}),
              Path(out_dir) / "sampled_clip")
    click.echo(f"wrote {Path(out_dir) / 'sampled_clip'}")


EVAL_DEFAULTS = {
    "protocol": "middle",
    "steps": 256,
    "mode": CFG,
    "guidance_weight": 2.0,
    "seed": 0,
    "batch_size": 8,
    "max_clips": None,
    "sr_steps": 256,
    "sr_guidance_weight": 2.0,
    "sr_aug_level": 0.1,
}


@cli.command("eval")
@_common
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--sr-checkpoint", type=click.Path(exists=True), default=None)
@click.option("--split", "split_dir", required=True, type=click.Path(exists=True))
def eval_cmd(config_file, sets, out_dir, checkpoint, sr_checkpoint, split_dir):
    """Score a stored split; writes metrics.jsonl (one record per clip plus a
    summary line)."""
    cfg = resolve_config(EVAL_DEFAULTS, config_file, sets)
    freeze_run_config(out_dir, "eval", cfg, cfg["seed"])
    model = load_model(checkpoint)
    sampler = SamplerConfig(
        steps=cfg["steps"], mode=cfg["mode"],
        guidance_weight=cfg["guidance_weight"], seed=cfg["seed"],
    )
    cascade_cfg = None
    target = model
    if sr_checkpoint:
        sr_model = load_model(sr_checkpoint)
        cascade_cfg = CascadeConfig(
            base_sampler=sampler,
            sr_sampler=SamplerConfig(
                steps=cfg["sr_steps"], guidance_weight=cfg["sr_guidance_weight"],
                seed=cfg["seed"],
            ),
            sr_aug_level=cfg["sr_aug_level"],
        )
        target = (model, sr_model)
    result = evaluate(
        target, split_dir, cfg["protocol"], sampler,
        cascade_cfg=cascade_cfg, base_seed=cfg["seed"],
        max_clips=cfg["max_clips"], batch_size=cfg["batch_size"],
    )
    path = write_metrics(result, Path(out_dir) / "metrics.jsonl")
    click.echo(json.dumps(result.aggregate()))
    click.echo(f"wrote {path}")


ABLATE_DEFAULTS = {
    "steps": 64,
    "seed": 0,
    "batch_size": 8,
    "max_clips": 32,
    "cfg_weights": list(CFG_WEIGHT_GRID),
    "recon_weights": list(RECON_WEIGHT_GRID),
}


@cli.command("ablate")
@_common
@click.option("--cond-checkpoint", required=True, type=click.Path(exists=True),
              help="Frame-conditioned model checkpoint.")
@click.option("--uncond-checkpoint", required=True, type=click.Path(exists=True),
              help="Unconditional 9-frame model checkpoint.")
@click.option("--split", "split_dir", required=True, type=click.Path(exists=True))
def ablate(config_file, sets, out_dir, cond_checkpoint, uncond_checkpoint, split_dir):
    """Sweep guidance weights for the conditioned model and the imputation /
    reconstruction-guidance baseline; emits a weight -> metric table."""
    cfg = resolve_config(ABLATE_DEFAULTS, config_file, sets)
    freeze_run_config(out_dir, "ablate", cfg, cfg["seed"])
    cond_model = load_model(cond_checkpoint)
    uncond_model = load_model(uncond_checkpoint)
    rows = ablation_sweep(
        cond_model, uncond_model, split_dir,
        steps=cfg["steps"], seed=cfg["seed"], batch_size=cfg["batch_size"],
        max_clips=cfg["max_clips"], cfg_weights=cfg["cfg_weights"],
        recon_weights=cfg["recon_weights"],
    )
    table_path = Path(out_dir) / "ablation.json"
    table_path.write_text(json.dumps(rows, indent=2) + "\n")
    click.echo(f"{'model':<14} {'mode':<16} {'weight':>6}  {'psnr':>7}  {'ssim':>7}")
    for r in rows:
        click.echo(
            f"{r['model']:<14} {r['mode']:<16} {r['weight']:>6.1f}  "
            f"{r['psnr']:>7.2f}  {r['ssim']:>7.4f}"
        )
    click.echo(f"wrote {table_path}")


def ablation_sweep(
    cond_model, uncond_model, split_dir, steps, seed, batch_size,
    max_clips, cfg_weights, recon_weights,
) -> list[dict]:
    """Middle-frame metrics over both weight grids (the library-level core of
    the `ablate` command)."""
    rows = []
    for w in cfg_weights:
        r = evaluate(
            cond_model, split_dir, "middle",
            SamplerConfig(steps=steps, mode=CFG, guidance_weight=w, seed=seed),
            base_seed=seed, max_clips=max_clips, batch_size=batch_size,
        ).aggregate()
        rows.append({"model": "conditioned", "mode": CFG, "weight": w,
                     "psnr": r["psnr"], "ssim": r["ssim"]})
    for w in recon_weights:
        mode = IMPUTATION if w == 1.0 else RECON_GUIDANCE
        r = evaluate(
            uncond_model, split_dir, "middle",
            SamplerConfig(steps=steps, mode=mode, guidance_weight=w, seed=seed),
            base_seed=seed, max_clips=max_clips, batch_size=batch_size,
        ).aggregate()
        rows.append({"model": "unconditional", "mode": mode, "weight": w,
                     "psnr": r["psnr"], "ssim": r["ssim"]})
    return rows


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except (click.UsageError, TweendiffError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except click.Abort:
        return 1
    except Exception as exc:  # runtime failure
        click.echo(f"runtime failure: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
