"""Pixel-to-latent KL autoencoder: the compression stage under the diffusion.

The encoder halves the spatial resolution between consecutive levels, so a
4-level config compresses by 8x; a 64x64x3 image maps to a 4x8x8 latent
with the desk defaults. Decoded images are clamped to [0, 1] at the output
boundary.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import ResBlock, Downsample, Upsample, group_norm, rng_seed
from .ckpt import load_checkpoint, save_checkpoint


@dataclass
class AutoencoderConfig:
    downsample_factor: int = 8
    latent_channels: int = 4
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 4)
    res_blocks: int = 1

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        expected = 2 ** (len(self.channel_multipliers) - 1)
        if self.downsample_factor != expected:
            raise ValueError(
                f"downsample_factor {self.downsample_factor} inconsistent with "
                f"{len(self.channel_multipliers)} levels (expected {expected})"
            )


def _check_divisible(x: torch.Tensor, d: int) -> None:
    if x.shape[-1] % d or x.shape[-2] % d:
        raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {d}")


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        widths = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        stages = []
        prev = widths[0]
        for i, w in enumerate(widths):
            blocks = [ResBlock(prev if j == 0 else w, w) for j in range(cfg.res_blocks)]
            if i < len(widths) - 1:
                blocks.append(Downsample(w))
            stages.append(nn.ModuleList(blocks))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.out_norm = group_norm(prev)
        self.out_conv = nn.Conv2d(prev, 2 * cfg.latent_channels, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        widths = [cfg.base_channels * m for m in cfg.channel_multipliers]
        self.stem = nn.Conv2d(cfg.latent_channels, widths[-1], 3, padding=1)
        stages = []
        prev = widths[-1]
        for i, w in reversed(list(enumerate(widths))):
            blocks = [ResBlock(prev if j == 0 else w, w) for j in range(cfg.res_blocks)]
            if i > 0:
                blocks.append(Upsample(w))
            stages.append(nn.ModuleList(blocks))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.out_norm = group_norm(prev)
        self.out_conv = nn.Conv2d(prev, 3, 3, padding=1)

    def forward(self, z):
        h = self.stem(z)
        for stage in self.stages:
            for block in stage:
                h = block(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class KLAutoencoder(nn.Module):
    """Encoder/decoder pair with a diagonal-Gaussian latent."""

    def __init__(self, config: AutoencoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with rng_seed(seed):
            self.encoder = Encoder(config)
            self.decoder = Decoder(config)

    @staticmethod
    def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
        if x.dim() == 3:
            return x.unsqueeze(0), True
        if x.dim() == 4:
            return x, False
        raise ValueError(f"expected rank-3 or rank-4 tensor, got rank {x.dim()}")

    def encode(self, x0: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map an image to the latent posterior (mean, log_variance)."""
        x, squeeze = self._batched(x0)
        _check_divisible(x, self.config.downsample_factor)
        out = self.encoder(x)
        mean, log_var = out.chunk(2, dim=1)
        if squeeze:
            mean, log_var = mean.squeeze(0), log_var.squeeze(0)
        return mean, log_var

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Map a latent back to pixel space, clamped to [0, 1]."""
        zz, squeeze = self._batched(z)
        if zz.shape[1] != self.config.latent_channels:
            raise ValueError(
                f"latent has {zz.shape[1]} channels, expected {self.config.latent_channels}"
            )
        out = torch.clamp(self.decoder(zz), 0.0, 1.0)
        return out.squeeze(0) if squeeze else out


def sample_latent(mean: torch.Tensor, log_variance: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw mean + exp(log_variance / 2) * noise."""
    if not (mean.shape == log_variance.shape == noise.shape):
        raise ValueError("mean, log_variance and noise must share one shape")
    return mean + torch.exp(0.5 * log_variance) * noise


def autoencoder_loss(
    x0: torch.Tensor,
    x_rec: torch.Tensor,
    mean: torch.Tensor,
    log_variance: torch.Tensor,
    kl_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Reconstruction MSE plus the element-averaged KL to the unit Gaussian."""
    if kl_weight < 0:
        raise ValueError(f"kl_weight must be nonnegative, got {kl_weight}")
    if x0.shape != x_rec.shape:
        raise ValueError("image shapes differ")
    rec = torch.mean((x0 - x_rec) ** 2)
    kl = 0.5 * torch.mean(mean**2 + torch.exp(log_variance) - 1.0 - log_variance)
    return rec + kl_weight * kl, rec, kl


@dataclass
class AutoencoderTrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 2e-3
    kl_weight: float = 1e-6
    seed: int = 0


def train_autoencoder(
    images: torch.Tensor,
    config: AutoencoderConfig,
    train_config: AutoencoderTrainConfig,
    checkpoint_path=None,
    log_path=None,
    model: Optional[KLAutoencoder] = None,
    start_epoch: int = 0,
    optimizer_state: Optional[dict] = None,
) -> tuple[KLAutoencoder, list[dict]]:
    """Fit the autoencoder on a stack of training images (N, 3, H, W).

    Batches are drawn in a seed-determined order; the per-epoch losses are
    appended to a line-delimited log when a path is given, and checkpoints
    (with optimizer state and epoch counter, for exact resume) are written
    after every epoch.
    """
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError("training corpus must be a non-empty (N, 3, H, W) tensor")
    if images.shape[-1] % config.downsample_factor or images.shape[-2] % config.downsample_factor:
        raise ValueError("corpus spatial dims conflict with the downsample factor")
    model = model if model is not None else KLAutoencoder(config, seed=train_config.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=train_config.learning_rate, weight_decay=0.0)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    n = images.shape[0]
    log: list[dict] = []
    first_epoch_rec = None
    for epoch in range(start_epoch, train_config.epochs):
        order_gen = torch.Generator().manual_seed(train_config.seed * 100003 + epoch)
        perm = torch.randperm(n, generator=order_gen)
        rec_sum = kl_sum = 0.0
        batches = 0
        for start in range(0, n, train_config.batch_size):
            idx = perm[start : start + train_config.batch_size]
            batch = images[idx]
            mean, log_var = model.encode(batch)
            noise = torch.randn(
                mean.shape,
                generator=torch.Generator().manual_seed(
                    train_config.seed * 7919 + epoch * 613 + start
                ),
            )
            z = sample_latent(mean, log_var, noise)
            x_rec = model.decoder(z)  # raw decoder output: training needs gradients past clamp
            total, rec, kl = autoencoder_loss(batch, x_rec, mean, log_var, train_config.kl_weight)
            if not torch.isfinite(total):
                raise RuntimeError(f"non-finite autoencoder loss at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            rec_sum += rec.item()
            kl_sum += kl.item()
            batches += 1
        entry = {
            "phase": "train_autoencoder",
            "epoch": epoch,
            "reconstruction": rec_sum / batches,
            "kl": kl_sum / batches,
            "time": time.time(),
        }
        log.append(entry)
        if first_epoch_rec is None:
            first_epoch_rec = entry["reconstruction"]
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(entry) + "\n")
        if checkpoint_path is not None:
            save_autoencoder(
                checkpoint_path, model,
                extra={"next_epoch": epoch + 1, "optimizer": opt.state_dict()},
            )
    if log and log[-1]["reconstruction"] > first_epoch_rec:
        raise RuntimeError(
            "autoencoder training diverged: final reconstruction loss "
            f"{log[-1]['reconstruction']:.6f} above initial {first_epoch_rec:.6f}"
        )
    return model, log


def save_autoencoder(path, model: KLAutoencoder, extra: Optional[dict] = None) -> None:
    save_checkpoint(
        path, "autoencoder", asdict(model.config), {"model": model.state_dict()}, extra=extra
    )


def load_autoencoder(path) -> KLAutoencoder:
    payload = load_checkpoint(path, "autoencoder")
    cfg = AutoencoderConfig(**payload["config"])
    model = KLAutoencoder(cfg)
    model.load_state_dict(payload["states"]["model"])
    return model
