"""Latent-space denoising U-Net.

The network has four encoder levels, one middle block, and four decoder
levels. An encoder level exposes one sublayer output per residual block
plus a terminal sublayer (a strided-conv downsample where the level
downsamples, another residual block otherwise), so the default two
residual blocks yield three sublayer outputs per level; decoder levels
mirror them by consuming the matching skip tensors in reverse order. The
guidance network's fusion block relies on this fixed sublayer count.

An optional class-embedding table turns the same network into the
class-conditioned baseline (embedding added to the timestep embedding).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import (
    Downsample,
    ResBlock,
    SelfAttention,
    Upsample,
    group_norm,
    rng_seed,
    timestep_embedding,
)

@dataclass
class DenoiserConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, int, int, int] = (1, 2, 4, 4)
    res_blocks_per_level: int = 2
    attention_levels: tuple[int, ...] = (3,)
    num_heads: int = 4
    time_embed_dim: int = 128
    latent_channels: int = 4
    latent_size: int = 8
    image_size: int = 64
    image_channels: int = 3
    num_classes: Optional[int] = None
    # guidance-network options
    connection_variant: str = "msg+sgdb"  # sd | msg | msg+sgeb3+sgeb4 | msg+sgdb
    sff_norm: str = "instance"  # instance | batch
    sff_act: str = "silu"  # silu | relu
    sg_uses_sd_encoder: bool = False
    sg_input_clean_latent: bool = False

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_levels = tuple(sorted(set(self.attention_levels)))
        if len(self.channel_multipliers) != 4:
            raise ValueError("channel_multipliers must have exactly 4 entries")
        if self.res_blocks_per_level < 1:
            raise ValueError("res_blocks_per_level must be positive")
        if self.connection_variant not in ("sd", "msg", "msg+sgeb3+sgeb4", "msg+sgdb"):
            raise ValueError(f"unknown connection_variant {self.connection_variant!r}")
        if self.sff_norm not in ("instance", "batch") or self.sff_act not in ("silu", "relu"):
            raise ValueError("sff_norm must be instance|batch and sff_act silu|relu")
        for l in self.attention_levels:
            if not 0 <= l < 4:
                raise ValueError(f"attention level {l} out of range")
            if self.widths[l] % self.num_heads:
                raise ValueError(
                    f"width {self.widths[l]} at level {l} not divisible by {self.num_heads} heads"
                )
        if self.image_size % self.latent_size:
            raise ValueError("image_size must be a multiple of latent_size")
        ratio = self.image_size // self.latent_size
        if ratio & (ratio - 1):
            raise ValueError("image/latent size ratio must be a power of two")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def sublayers_per_level(self) -> int:
        return self.res_blocks_per_level + 1

    @property
    def num_downsamples(self) -> int:
        """Downsample between levels while the deepest grid stays >= 2 px."""
        downs, size = 0, self.latent_size
        while downs < 3 and size // 2 >= 2:
            size //= 2
            downs += 1
        return downs

    def level_sizes(self) -> list[int]:
        sizes, size = [], self.latent_size
        for l in range(4):
            sizes.append(size)
            if l < self.num_downsamples:
                size //= 2
        return sizes


class _Sublayer(nn.Module):
    """One encoder sublayer: a res block or downsample, plus optional attention."""

    def __init__(self, op: nn.Module, attn: Optional[nn.Module]):
        super().__init__()
        self.op = op
        self.attn = attn

    def forward(self, x, temb):
        h = self.op(x, temb)
        if self.attn is not None:
            h = self.attn(h)
        return h


class _DecoderUnit(nn.Module):
    """Decoder sublayer consuming one skip tensor, with optional upsample after."""

    def __init__(self, res: ResBlock, attn: Optional[nn.Module], up: Optional[Upsample]):
        super().__init__()
        self.res = res
        self.attn = attn
        self.up = up

    def forward(self, x, skip, temb):
        h = self.res(torch.cat([x, skip], dim=1), temb)
        if self.attn is not None:
            h = self.attn(h)
        if self.up is not None:
            h = self.up(h)
        return h


def build_encoder_levels(cfg: DenoiserConfig) -> nn.ModuleList:
    widths = cfg.widths
    levels = []
    prev = widths[0]
    for l, w in enumerate(widths):
        subs = []
        for j in range(cfg.res_blocks_per_level):
            attn = SelfAttention(w, cfg.num_heads) if l in cfg.attention_levels else None
            subs.append(_Sublayer(ResBlock(prev if j == 0 else w, w, cfg.time_embed_dim), attn))
        if l < cfg.num_downsamples:
            subs.append(_Sublayer(Downsample(w), None))
        else:
            attn = SelfAttention(w, cfg.num_heads) if l in cfg.attention_levels else None
            subs.append(_Sublayer(ResBlock(w, w, cfg.time_embed_dim), attn))
        levels.append(nn.ModuleList(subs))
        prev = w
    return nn.ModuleList(levels)


def build_middle(cfg: DenoiserConfig) -> nn.ModuleList:
    w = cfg.widths[-1]
    return nn.ModuleList([
        ResBlock(w, w, cfg.time_embed_dim),
        SelfAttention(w, cfg.num_heads),
        ResBlock(w, w, cfg.time_embed_dim),
    ])


def build_decoder_level(cfg: DenoiserConfig, level: int, h_ch: int) -> tuple[nn.ModuleList, int]:
    """Mirror of encoder level ``level``; returns (units, output channels)."""
    w = cfg.widths[level]
    units = []
    downsampled = level < cfg.num_downsamples
    for j in range(cfg.sublayers_per_level):
        attn = SelfAttention(w, cfg.num_heads) if level in cfg.attention_levels else None
        res = ResBlock((h_ch if j == 0 else w) + w, w, cfg.time_embed_dim)
        # the first unit of a downsampled level consumes the low-res skip,
        # then returns to the level's resolution
        up = Upsample(w) if downsampled and j == 0 else None
        units.append(_DecoderUnit(res, attn, up))
    return nn.ModuleList(units), w


class DenoisingUNet(nn.Module):
    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with rng_seed(seed):
            w = config.widths
            self.time_mlp = nn.Sequential(
                nn.Linear(config.base_channels, config.time_embed_dim),
                nn.SiLU(),
                nn.Linear(config.time_embed_dim, config.time_embed_dim),
            )
            self.class_embed = (
                nn.Embedding(config.num_classes, config.time_embed_dim)
                if config.num_classes
                else None
            )
            self.stem = nn.Conv2d(config.latent_channels, w[0], 3, padding=1)
            self.enc_levels = build_encoder_levels(config)
            self.middle = build_middle(config)
            dec = []
            h_ch = w[-1]
            for level in range(3, -1, -1):
                units, h_ch = build_decoder_level(config, level, h_ch)
                dec.append(units)
            self.dec_levels = nn.ModuleList(dec)  # deepest level first
            self.out_norm = group_norm(w[0])
            self.out_conv = nn.Conv2d(w[0], config.latent_channels, 3, padding=1)

    # ---------------------------------------------------------- helpers

    def embed_timestep(
        self, t, batch: int, dtype: torch.dtype, class_id: Optional[int] = None
    ) -> torch.Tensor:
        if isinstance(t, int):
            t = torch.full((batch,), t, dtype=torch.long)
        emb = timestep_embedding(t, self.config.base_channels).to(dtype)
        emb = self.time_mlp(emb)
        if class_id is not None:
            if self.class_embed is None:
                raise ValueError("network was built without class conditioning")
            if not 0 <= class_id < self.config.num_classes:
                raise ValueError(f"class_id {class_id} out of range")
            emb = emb + self.class_embed(torch.full((batch,), class_id, dtype=torch.long))
        return emb

    def encode(self, h: torch.Tensor, temb: torch.Tensor) -> tuple[torch.Tensor, list[list[torch.Tensor]]]:
        """Run all encoder levels; returns final activations and per-level sublayer outputs."""
        level_outputs: list[list[torch.Tensor]] = []
        for level in self.enc_levels:
            outs = []
            for sub in level:
                h = sub(h, temb)
                outs.append(h)
            level_outputs.append(outs)
        return h, level_outputs

    def run_middle(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.middle[0](h, temb)
        h = self.middle[1](h)
        return self.middle[2](h, temb)

    def decode(
        self,
        h: torch.Tensor,
        level_outputs: list[list[torch.Tensor]],
        temb: torch.Tensor,
        skip_offsets: Optional[dict[int, list[torch.Tensor]]] = None,
    ) -> torch.Tensor:
        """Run the decoder against encoder sublayer outputs (consumed in reverse).

        ``skip_offsets`` maps an encoder level index to three tensors added
        to that level's skips before use (the guidance network's direct
        skip-connection variant).
        """
        for i, units in enumerate(self.dec_levels):
            level = 3 - i
            skips = list(level_outputs[level])
            if skip_offsets and level in skip_offsets:
                skips = [s + o for s, o in zip(skips, skip_offsets[level])]
            for unit, skip in zip(units, reversed(skips)):
                h = unit(h, skip, temb)
        return self.out_conv(F.silu(self.out_norm(h)))

    # ---------------------------------------------------------- forward

    def forward(self, z, t, class_id: Optional[int] = None) -> torch.Tensor:
        zz, squeeze = (z.unsqueeze(0), True) if z.dim() == 3 else (z, False)
        temb = self.embed_timestep(t, zz.shape[0], zz.dtype, class_id)
        h = self.stem(zz)
        h, level_outputs = self.encode(h, temb)
        h = self.run_middle(h, temb)
        out = self.decode(h, level_outputs, temb)
        return out.squeeze(0) if squeeze else out


def predict_noise_ldm_baseline(z_t, t, class_id: int, unet: DenoisingUNet) -> torch.Tensor:
    """Class-embedding-conditioned forward pass of the plain denoiser."""
    return unet(z_t, t, class_id=class_id)
