"""The video UNet denoiser.

All convolution and spatial-attention blocks are shared over frames (frames
fold into the batch axis); information mixes across frames only inside the
temporal attention blocks, whose sequence axis is the frame index. Per-frame
embeddings (noise level + timestamp) modulate every residual block via FiLM.

The super-resolution variant additionally takes a 7-frame low-res stack: it
is bilinearly upsampled and concatenated to the input along the channel axis,
and the network downsamples once before its first residual block to keep
full-resolution activations cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .conditioning import (
    COND_SLOTS,
    FRAME_COUNT,
    GENERATED_SLOTS,
    LOG_SNR_EMBED_SCALE,
    FrameEmbedding,
    ModelInput,
    sinusoidal_embedding,
)
from .diffusion import DEFAULT_SCHEDULE, log_snr
from .errors import ConfigError, ShapeError
from .resize import area_downsample, naive_upsample

BASE = "base"
SUPER_RESOLUTION = "super_resolution"


@dataclass(frozen=True)
class ResolutionSpec:
    """One UNet level: spatial size, width, block count, attention heads."""

    size: int
    channels: int
    subblocks: int
    temporal_heads: int
    spatial_attention: bool = False

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "channels": self.channels,
            "subblocks": self.subblocks,
            "temporal_heads": self.temporal_heads,
            "spatial_attention": self.spatial_attention,
        }


@dataclass(frozen=True)
class ModelConfig:
    frame_size: int
    resolutions: tuple[ResolutionSpec, ...]
    variant: str = BASE
    conditional: bool = True
    in_channels: int = 3
    frames: int = FRAME_COUNT
    dropout_rate: float = 0.0
    dropout_max_size: int = 64

    def __post_init__(self):
        if self.variant not in (BASE, SUPER_RESOLUTION):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not self.resolutions:
            raise ConfigError("at least one resolution level is required")
        sizes = [r.size for r in self.resolutions]
        if sizes != sorted(sizes, reverse=True):
            raise ConfigError("resolutions must be ordered largest to smallest")
        for a, b in zip(sizes, sizes[1:]):
            if a != 2 * b:
                raise ConfigError(f"adjacent resolutions must halve: {a} -> {b}")
        top = self.resolutions[0].size
        expected = 2 * top if self.variant == SUPER_RESOLUTION else top
        if self.frame_size != expected:
            raise ConfigError(
                f"frame_size {self.frame_size} inconsistent with first resolution {top} "
                f"for variant {self.variant!r}"
            )
        head_dims = set()
        for r in self.resolutions:
            if r.channels % r.temporal_heads:
                raise ConfigError(
                    f"channels {r.channels} not divisible by heads {r.temporal_heads}"
                )
            head_dims.add(r.channels // r.temporal_heads)
        if len(head_dims) != 1:
            raise ConfigError(f"per-head dimension must be uniform, got {sorted(head_dims)}")
        smallest = min(sizes)
        for r in self.resolutions:
            if r.spatial_attention and r.size != smallest:
                raise ConfigError("spatial self-attention is only allowed at the lowest resolution")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.resolutions[0].channels % 2:
            raise ConfigError("first-resolution channel count must be even (embedding width)")

    @property
    def head_dim(self) -> int:
        r = self.resolutions[0]
        return r.channels // r.temporal_heads

    def to_dict(self) -> dict:
        return {
            "frame_size": self.frame_size,
            "resolutions": [r.to_dict() for r in self.resolutions],
            "variant": self.variant,
            "conditional": self.conditional,
            "in_channels": self.in_channels,
            "frames": self.frames,
            "dropout_rate": self.dropout_rate,
            "dropout_max_size": self.dropout_max_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        res = tuple(ResolutionSpec(**r) for r in d.pop("resolutions"))
        return cls(resolutions=res, **d)


def desk_base_config(conditional: bool = True, width: int = 32) -> ModelConfig:
    """Default single-machine base model: 9 frames at 32x32."""
    return ModelConfig(
        frame_size=32,
        resolutions=(
            ResolutionSpec(32, width * 2, 2, 2),
            ResolutionSpec(16, width * 4, 2, 4),
            ResolutionSpec(8, width * 8, 2, 8, spatial_attention=True),
        ),
        variant=BASE,
        conditional=conditional,
    )


def desk_sr_config(width: int = 32) -> ModelConfig:
    """Default single-machine super-resolution model: 32 -> 64."""
    return ModelConfig(
        frame_size=64,
        resolutions=(
            ResolutionSpec(32, width * 2, 2, 2),
            ResolutionSpec(16, width * 4, 2, 4),
            ResolutionSpec(8, width * 8, 2, 8, spatial_attention=True),
        ),
        variant=SUPER_RESOLUTION,
    )


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def film_modulate(features: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """features * (1 + scale) + shift, with per-channel scale/shift."""
    if scale.shape != shift.shape or scale.shape[-1] != features.shape[1]:
        raise ShapeError(
            f"FiLM widths do not match: features C={features.shape[1]}, "
            f"scale {tuple(scale.shape)}, shift {tuple(shift.shape)}"
        )
    scale = scale.view(*scale.shape, 1, 1)
    shift = shift.view(*shift.shape, 1, 1)
    return features * (1.0 + scale) + shift


class FilmResBlock(nn.Module):
    """GroupNorm/SiLU/conv residual block with FiLM from the frame embedding."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.to_film = nn.Linear(emb_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.to_film(emb).chunk(2, dim=-1)
        h = film_modulate(self.norm2(h), scale, shift)
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class QKNormAttention(nn.Module):
    """Multi-head attention with L2-normalized queries and keys.

    Normalizing q and k per head makes the attention logits invariant to the
    magnitude of the incoming features; a learned per-head temperature sets
    the logit scale.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        self.heads = heads
        self.to_qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.logit_scale = nn.Parameter(torch.full((heads,), 10.0))
        self.to_out = nn.Linear(dim, dim, bias=False)

    def attention_weights(self, tokens: Tensor) -> Tensor:
        q, k, _ = self._qkv(tokens)
        return self._weights(q, k)

    def _qkv(self, tokens: Tensor):
        q, k, v = self.to_qkv(tokens).chunk(3, dim=-1)
        split = lambda t: rearrange(t, "n l (h d) -> n h l d", h=self.heads)
        return split(q), split(k), split(v)

    def _weights(self, q: Tensor, k: Tensor) -> Tensor:
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        logits = torch.einsum("nhid,nhjd->nhij", q, k) * self.logit_scale.view(1, -1, 1, 1)
        return logits.softmax(dim=-1)

    def forward(self, tokens: Tensor) -> Tensor:
        q, k, v = self._qkv(tokens)
        q = F.normalize(q, dim=-1) * self.logit_scale.view(1, -1, 1, 1)
        k = F.normalize(k, dim=-1)
        out = F.scaled_dot_product_attention(q, k, v, scale=1.0)
        return self.to_out(rearrange(out, "n h l d -> n l (h d)"))


TEMPORAL = "temporal"
SPATIAL = "spatial"


class ParallelAttentionBlock(nn.Module):
    """Pre-norm attention with an MLP branch running in parallel.

    out = x + attention(norm(x)) + mlp(norm(x)). The axis decides what forms
    the sequence: frames (one sequence per spatial location) or spatial
    positions (one sequence per frame).
    """

    def __init__(self, dim: int, heads: int, axis: str):
        super().__init__()
        if axis not in (TEMPORAL, SPATIAL):
            raise ConfigError(f"unknown attention axis {axis!r}")
        self.axis = axis
        self.norm = nn.LayerNorm(dim)
        self.attn = QKNormAttention(dim, heads)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim)
        )
        nn.init.zeros_(self.attn.to_out.weight)
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, h: Tensor, frames: int) -> Tensor:
        b = h.shape[0] // frames
        if self.axis == TEMPORAL:
            tokens = rearrange(h, "(b f) c x y -> (b x y) f c", f=frames)
        else:
            tokens = rearrange(h, "(b f) c x y -> (b f) (x y) c", f=frames)
        normed = self.norm(tokens)
        tokens = tokens + self.attn(normed) + self.mlp(normed)
        if self.axis == TEMPORAL:
            return rearrange(tokens, "(b x y) f c -> (b f) c x y", b=b, x=h.shape[2], y=h.shape[3])
        return rearrange(tokens, "(b f) (x y) c -> (b f) c x y", f=frames, x=h.shape[2])


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _LevelBlocks(nn.Module):
    """Subblocks of one UNet level: ResBlock [+ spatial attn] + temporal attn."""

    def __init__(self, spec: ResolutionSpec, in_chs: list[int], emb_dim: int, dropout: float):
        super().__init__()
        self.res = nn.ModuleList(
            FilmResBlock(c, spec.channels, emb_dim, dropout) for c in in_chs
        )
        self.spatial = nn.ModuleList(
            ParallelAttentionBlock(spec.channels, spec.temporal_heads, SPATIAL)
            if spec.spatial_attention
            else nn.Identity()
            for _ in in_chs
        )
        self.temporal = nn.ModuleList(
            ParallelAttentionBlock(spec.channels, spec.temporal_heads, TEMPORAL) for _ in in_chs
        )

    def run(self, idx: int, h: Tensor, emb: Tensor, frames: int) -> Tensor:
        h = self.res[idx](h, emb)
        sp = self.spatial[idx]
        if not isinstance(sp, nn.Identity):
            h = sp(h, frames)
        return self.temporal[idx](h, frames)


class VideoUNet(nn.Module):
    """Denoiser over a 9-frame stack; predicts v for the noisy slots."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        specs = config.resolutions
        ch0 = specs[0].channels
        emb_base = ch0
        emb_dim = 4 * ch0
        self.frame_embedding = FrameEmbedding(emb_base)
        self.emb_mlp = nn.Sequential(
            nn.Linear(emb_base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        is_sr = config.variant == SUPER_RESOLUTION
        if is_sr:
            self.aug_mlp = nn.Sequential(
                nn.Linear(emb_base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
            )
        stem_in = config.in_channels * (2 if is_sr else 1)
        self.stem = nn.Conv2d(stem_in, ch0, 3, padding=1)
        self.stem_down = Downsample(ch0, ch0) if is_sr else None

        def dropout_at(size: int) -> float:
            return config.dropout_rate if size <= config.dropout_max_size else 0.0

        skip_chs: list[int] = [ch0]
        self.down_levels = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = ch0
        for i, spec in enumerate(specs):
            in_chs = []
            for _ in range(spec.subblocks):
                in_chs.append(ch)
                ch = spec.channels
                skip_chs.append(ch)
            self.down_levels.append(_LevelBlocks(spec, in_chs, emb_dim, dropout_at(spec.size)))
            if i < len(specs) - 1:
                self.downsamples.append(Downsample(ch, specs[i + 1].channels))
                ch = specs[i + 1].channels
                skip_chs.append(ch)

        mid_spec = specs[-1]
        mid_drop = dropout_at(mid_spec.size)
        self.mid_res1 = FilmResBlock(ch, ch, emb_dim, mid_drop)
        self.mid_spatial = (
            ParallelAttentionBlock(ch, mid_spec.temporal_heads, SPATIAL)
            if mid_spec.spatial_attention
            else None
        )
        self.mid_temporal = ParallelAttentionBlock(ch, mid_spec.temporal_heads, TEMPORAL)
        self.mid_res2 = FilmResBlock(ch, ch, emb_dim, mid_drop)

        self.up_levels = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(specs))):
            spec = specs[i]
            in_chs = []
            for _ in range(spec.subblocks + 1):
                in_chs.append(ch + skip_chs.pop())
                ch = spec.channels
            self.up_levels.append(_LevelBlocks(spec, in_chs, emb_dim, dropout_at(spec.size)))
            if i > 0:
                self.upsamples.append(Upsample(ch, specs[i - 1].channels))
                ch = specs[i - 1].channels
        self.final_up = Upsample(ch0, ch0) if is_sr else None
        self.out_norm = nn.GroupNorm(_norm_groups(ch0), ch0)
        self.out_conv = nn.Conv2d(ch0, config.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(
        self,
        inp: ModelInput,
        low_res_cond: Tensor | None = None,
        aug_level: float | Tensor | None = None,
    ) -> Tensor:
        cfg = self.config
        frames = inp.frames
        b, f = frames.shape[:2]
        if f != cfg.frames:
            raise ShapeError(f"expected {cfg.frames} frames, got {f}")
        if frames.shape[-1] != cfg.frame_size:
            raise ShapeError(
                f"expected {cfg.frame_size}px frames, got {frames.shape[-1]}px"
            )
        is_sr = cfg.variant == SUPER_RESOLUTION
        if is_sr:
            if low_res_cond is None or aug_level is None:
                raise ConfigError("the super-resolution variant requires low_res_cond and aug_level")
            factor = cfg.frame_size // low_res_cond.shape[-1]
            if factor * low_res_cond.shape[-1] != cfg.frame_size:
                raise ConfigError(
                    f"low-res size {low_res_cond.shape[-1]} does not divide {cfg.frame_size}"
                )
            partner = torch.empty_like(frames)
            partner[:, GENERATED_SLOTS] = naive_upsample(low_res_cond.to(frames.dtype), factor)
            ends = frames[:, list(COND_SLOTS)]
            partner[:, list(COND_SLOTS)] = naive_upsample(area_downsample(ends, factor), factor)
            x = torch.cat([frames, partner], dim=2)
        else:
            if low_res_cond is not None:
                raise ConfigError("low_res_cond is only valid for the super-resolution variant")
            x = frames

        emb = self.emb_mlp(self.frame_embedding(inp.log_snr, inp.timestamps, inp.null_mask))
        if is_sr:
            lam_aug = log_snr(
                aug_level if isinstance(aug_level, Tensor) else float(aug_level), DEFAULT_SCHEDULE
            )
            if not isinstance(lam_aug, Tensor):
                lam_aug = torch.tensor([lam_aug] * b)
            aug_emb = sinusoidal_embedding(
                lam_aug.to(frames.device) * LOG_SNR_EMBED_SCALE,
                self.frame_embedding.dim,
                dtype=emb.dtype,
            )
            emb = emb + self.aug_mlp(aug_emb).unsqueeze(1)
        emb2d = rearrange(emb, "b f e -> (b f) e")

        h = self.stem(rearrange(x, "b f c x y -> (b f) c x y"))
        if self.stem_down is not None:
            h = self.stem_down(h)
        hs = [h]
        for i, level in enumerate(self.down_levels):
            for j in range(len(level.res)):
                h = level.run(j, h, emb2d, f)
                hs.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
                hs.append(h)

        h = self.mid_res1(h, emb2d)
        if self.mid_spatial is not None:
            h = self.mid_spatial(h, f)
        h = self.mid_temporal(h, f)
        h = self.mid_res2(h, emb2d)

        for i, level in enumerate(self.up_levels):
            for j in range(len(level.res)):
                h = level.run(j, torch.cat([h, hs.pop()], dim=1), emb2d, f)
            if i < len(self.upsamples):
                h = self.upsamples[i](h)

        if self.final_up is not None:
            h = self.final_up(h)
        out = self.out_conv(F.silu(self.out_norm(h)))
        out = rearrange(out, "(b f) c x y -> b f c x y", b=b)
        return out[:, GENERATED_SLOTS] if cfg.conditional else out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
