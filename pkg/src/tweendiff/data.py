"""Synthetic ambiguous-motion clips, burst subsampling, and clip storage.

A clip is a colored square sprite moving over a flat background along a
piecewise-linear path start -> waypoint -> end across 9 frames. With
ambiguous=True the waypoint is drawn uniformly from a fixed candidate set
determined by (start, end) - identical endpoints can hide different middle
frames - and the endpoints are far apart. With ambiguous=False the waypoint
is the midpoint and the motion is short and fully determined.

On disk a clip is a directory of frame_0.png .. frame_8.png plus a
metadata.txt of "key: value" lines; a dataset manifest is a newline-delimited
list of clip directories.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ClipFormatError, ConfigError, RespecifyError, ShapeError, SizeError

FRAME_COUNT = 9
CHANNELS = 3

TRAIN_SPLIT = "train"
LINEAR_SPLIT = "eval_linear"
AMBIGUOUS_SPLIT = "eval_ambiguous"
_SPLIT_IDS = {TRAIN_SPLIT: 0, LINEAR_SPLIT: 1, AMBIGUOUS_SPLIT: 2}

# waypoint offsets perpendicular to the travel direction, as a fraction of
# the travel distance; 0 keeps the linear path in the candidate set
AMBIGUOUS_OFFSET_FRACTIONS = (-0.35, 0.0, 0.35)


@dataclass
class SpriteSpec:
    """Square sprite: size in pixels, top-left corner positions, fg/bg colors."""

    size: int
    start: tuple[float, float]  # (row, col)
    end: tuple[float, float]
    waypoint: tuple[float, float] | None
    fg_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bg_color: tuple[float, float, float] = (-1.0, -1.0, -1.0)


@dataclass
class VideoClip:
    """Nine ordered frames (9, 3, H, W) in [-1, 1] with timestamps i/8."""

    frames: np.ndarray
    timestamps: np.ndarray = field(
        default_factory=lambda: np.linspace(0.0, 1.0, FRAME_COUNT)
    )
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4 or f.shape[0] != FRAME_COUNT or f.shape[1] != CHANNELS:
            raise ShapeError(f"clip frames must be (9, 3, H, W), got {tuple(f.shape)}")
        if f.min() < -1.0 - 1e-6 or f.max() > 1.0 + 1e-6:
            raise ShapeError("clip pixel values must lie in [-1, 1]")
        if self.timestamps.shape != (FRAME_COUNT,):
            raise ShapeError("timestamps must have one entry per frame")

    @property
    def resolution(self) -> int:
        return self.frames.shape[-1]


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def sprite_positions(spec: SpriteSpec) -> list[tuple[int, int]]:
    """Rounded per-frame corner positions along start -> waypoint -> end."""
    if spec.waypoint is None:
        raise ConfigError("sprite spec has no waypoint; generate or set one first")
    pts = []
    mid = FRAME_COUNT // 2
    for i in range(FRAME_COUNT):
        if i <= mid:
            u = i / mid
            a, b = spec.start, spec.waypoint
        else:
            u = (i - mid) / mid
            a, b = spec.waypoint, spec.end
        row = a[0] + u * (b[0] - a[0])
        col = a[1] + u * (b[1] - a[1])
        pts.append((_round_half_away(row), _round_half_away(col)))
    return pts


def waypoint_candidates(
    start: tuple[float, float], end: tuple[float, float]
) -> list[tuple[float, float]]:
    """Fixed waypoint set for an endpoint pair: the midpoint displaced
    perpendicular to the travel direction by each configured fraction."""
    sr, sc = start
    er, ec = end
    mid = ((sr + er) / 2.0, (sc + ec) / 2.0)
    d = math.hypot(er - sr, ec - sc)
    if d == 0:
        return [mid]
    perp = (-(ec - sc) / d, (er - sr) / d)
    return [
        (mid[0] + f * d * perp[0], mid[1] + f * d * perp[1])
        for f in AMBIGUOUS_OFFSET_FRACTIONS
    ]


def _validate_path(spec: SpriteSpec, resolution: int) -> None:
    limit = resolution - spec.size
    for row, col in sprite_positions(spec):
        if not (0 <= row <= limit and 0 <= col <= limit):
            raise RespecifyError(
                f"sprite path leaves the canvas at ({row}, {col}) "
                f"for size {spec.size}, resolution {resolution}"
            )


def _render(spec: SpriteSpec, resolution: int) -> np.ndarray:
    frames = np.empty((FRAME_COUNT, CHANNELS, resolution, resolution), dtype=np.float32)
    bg = np.asarray(spec.bg_color, dtype=np.float32).reshape(CHANNELS, 1, 1)
    fg = np.asarray(spec.fg_color, dtype=np.float32).reshape(CHANNELS, 1)
    frames[:] = bg
    s = spec.size
    for i, (row, col) in enumerate(sprite_positions(spec)):
        frames[i, :, row : row + s, col : col + s] = fg[..., None]
    return frames


def _sample_spec(rng: np.random.Generator, resolution: int, ambiguous: bool) -> SpriteSpec:
    unit = resolution / 32.0
    size = int(rng.integers(round(5 * unit), round(8 * unit) + 1))
    limit = resolution - size
    fg = rng.uniform(0.2, 1.0, size=CHANNELS)
    bg = rng.uniform(-1.0, -0.4, size=CHANNELS)
    if ambiguous:
        # long horizontal travel; rows leave room for every waypoint candidate
        for _ in range(1000):
            start = (float(rng.uniform(0, limit)), float(rng.uniform(0, 0.12 * resolution)))
            end = (
                float(rng.uniform(0, limit)),
                float(rng.uniform(limit - 0.12 * resolution, limit)),
            )
            spec = SpriteSpec(size, start, end, None, tuple(fg), tuple(bg))
            if all(
                _path_in_canvas(spec, w, resolution) for w in waypoint_candidates(start, end)
            ):
                return spec
        raise RespecifyError("could not place an ambiguous sprite path")
    # short travel in a random direction, linear motion
    for _ in range(1000):
        start = (float(rng.uniform(0, limit)), float(rng.uniform(0, limit)))
        angle = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.12 * resolution, 0.3 * resolution)
        end = (start[0] + dist * math.sin(angle), start[1] + dist * math.cos(angle))
        if 0 <= end[0] <= limit and 0 <= end[1] <= limit:
            return SpriteSpec(size, start, end, None, tuple(fg), tuple(bg))
    raise RespecifyError("could not place a linear sprite path")


def _path_in_canvas(spec: SpriteSpec, waypoint: tuple[float, float], resolution: int) -> bool:
    probe = SpriteSpec(spec.size, spec.start, spec.end, waypoint, spec.fg_color, spec.bg_color)
    limit = resolution - spec.size
    return all(
        0 <= r <= limit and 0 <= c <= limit for r, c in sprite_positions(probe)
    )


def gen_synthetic_clip(
    seed,
    resolution: int = 64,
    ambiguous: bool = True,
    sprite: SpriteSpec | None = None,
) -> tuple[VideoClip, SpriteSpec]:
    """Generate one clip. Identical seeds give identical clips.

    A partial SpriteSpec (waypoint=None) pins everything except the waypoint,
    which is drawn from the candidate set (ambiguous) or set to the midpoint.
    """
    if resolution < 16:
        raise ConfigError(f"resolution must be at least 16, got {resolution}")
    rng = np.random.default_rng(seed)
    spec = _sample_spec(rng, resolution, ambiguous) if sprite is None else sprite
    if spec.waypoint is None:
        if ambiguous:
            cands = waypoint_candidates(spec.start, spec.end)
            spec = SpriteSpec(
                spec.size,
                spec.start,
                spec.end,
                cands[int(rng.integers(len(cands)))],
                spec.fg_color,
                spec.bg_color,
            )
        else:
            mid = (
                (spec.start[0] + spec.end[0]) / 2.0,
                (spec.start[1] + spec.end[1]) / 2.0,
            )
            spec = SpriteSpec(spec.size, spec.start, spec.end, mid, spec.fg_color, spec.bg_color)
    _validate_path(spec, resolution)
    clip = VideoClip(frames=_render(spec, resolution), meta={"resolution": resolution})
    return clip, spec


def clip_seed(global_seed: int, split: str, index: int) -> list[int]:
    """Entropy for one example; the stream is a pure function of these."""
    if split not in _SPLIT_IDS:
        raise ConfigError(f"unknown split {split!r}")
    return [int(global_seed), _SPLIT_IDS[split], int(index)]


def training_clip(global_seed: int, index: int, resolution: int = 64) -> VideoClip:
    """Training-stream example: even indices ambiguous, odd indices linear."""
    clip, _ = gen_synthetic_clip(
        clip_seed(global_seed, TRAIN_SPLIT, index),
        resolution=resolution,
        ambiguous=(index % 2 == 0),
    )
    return clip


def subsample_indices(burst_len: int, n: int = FRAME_COUNT) -> list[int]:
    """Evenly spaced indices round(i*(B-1)/(n-1)), half rounded away from zero."""
    if burst_len < n:
        raise SizeError(f"burst of {burst_len} frames is shorter than target {n}")
    if n < 2:
        raise ConfigError("need at least two frames to subsample")
    return [_round_half_away(i * (burst_len - 1) / (n - 1)) for i in range(n)]


def subsample_burst(burst: np.ndarray, n: int = FRAME_COUNT) -> VideoClip:
    """Evenly subsample n frames from a (B, 3, H, W) burst into a clip."""
    if burst.ndim != 4:
        raise ShapeError(f"burst must be (B, C, H, W), got {tuple(burst.shape)}")
    idx = subsample_indices(burst.shape[0], n)
    return VideoClip(frames=np.ascontiguousarray(burst[idx]))


def save_clip(clip: VideoClip, directory: str | os.PathLike) -> Path:
    """Write frame_0.png .. frame_8.png plus metadata.txt; quantizes to 8-bit."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        q = np.clip(np.floor((frame + 1.0) / 2.0 * 255.0 + 0.5), 0, 255).astype(np.uint8)
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(directory / f"frame_{i}.png")
    meta = {"resolution": clip.resolution, **clip.meta}
    lines = [f"{k}: {meta[k]}" for k in sorted(meta)]
    (directory / "metadata.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_clip(directory: str | os.PathLike) -> VideoClip:
    directory = Path(directory)
    if not directory.is_dir():
        raise ClipFormatError(f"{directory} is not a directory")
    frame_files = sorted(directory.glob("frame_*.png"))
    expected = [directory / f"frame_{i}.png" for i in range(FRAME_COUNT)]
    if frame_files != expected:
        raise ClipFormatError(
            f"{directory} must contain exactly frame_0.png .. frame_8.png, "
            f"found {[p.name for p in frame_files]}"
        )
    frames = np.stack(
        [np.asarray(Image.open(p), dtype=np.float32).transpose(2, 0, 1) for p in expected]
    )
    frames = frames / 255.0 * 2.0 - 1.0
    meta = {}
    meta_path = directory / "metadata.txt"
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if ":" in line:
                k, v = line.split(":", 1)
                meta[k.strip()] = v.strip()
    return VideoClip(frames=frames, meta=meta)


def write_manifest(clip_dirs: list[str | os.PathLike], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(str(d) for d in clip_dirs) + "\n")
    return path


def read_manifest(path: str | os.PathLike) -> list[Path]:
    path = Path(path)
    root = path.parent
    dirs = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            dirs.append(p if p.is_absolute() else root / p)
    return dirs


def make_dataset(
    root: str | os.PathLike,
    split: str,
    n_clips: int,
    global_seed: int,
    resolution: int = 64,
) -> Path:
    """Write n_clips clips of one split plus a manifest; returns the manifest path."""
    root = Path(root) / split
    width = max(5, len(str(max(n_clips - 1, 0))))
    dirs = []
    for i in range(n_clips):
        if split == TRAIN_SPLIT:
            ambiguous = i % 2 == 0
        else:
            ambiguous = split == AMBIGUOUS_SPLIT
        clip, _ = gen_synthetic_clip(
            clip_seed(global_seed, split, i), resolution=resolution, ambiguous=ambiguous
        )
        clip.meta.update({"seed": f"{global_seed}/{split}/{i}", "split": split})
        name = f"clip_{i:0{width}d}"
        save_clip(clip, root / name)
        dirs.append(name)
    return write_manifest(dirs, root / "manifest.txt")
