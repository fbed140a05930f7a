"""Guidance network grafted onto the frozen denoiser.

A trainable clone of the denoiser's encoder, middle block, and deepest
decoder level runs alongside the frozen network. The clone sees the noisy
latent plus an embedding of the clean input image (the "hint"), and its
outputs are injected into the frozen path through zero-initialized
projection layers, so the assembly behaves exactly like the plain
denoiser until training moves the connection weights.

Supported connection graphs (``DenoiserConfig.connection_variant``):

    sd               no injection at all (plain denoiser)
    msg              middle-block output added to the frozen middle output
    msg+sgeb3+sgeb4  msg, plus encoder levels 2/3 outputs added to the
                     frozen decoder's matching skip tensors
    msg+sgdb         msg, plus the cloned deepest decoder level run on
                     level-3 features fused with level-2 features, its
                     output added to the frozen decoder's input (default)
"""

from __future__ import annotations

import copy
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import rng_seed, zero_module
from .ckpt import load_checkpoint, save_checkpoint
from .unet import DenoiserConfig, DenoisingUNet, build_decoder_level, build_encoder_levels, build_middle


class HintEncoder(nn.Module):
    """Conv-SiLU stack mapping the input image onto the first-level latent grid.

    The final convolution is zero-initialized so the hint contributes
    nothing at initialization.
    """

    def __init__(self, cfg: DenoiserConfig, base_width: int = 16):
        super().__init__()
        num_downs = (cfg.image_size // cfg.latent_size).bit_length() - 1
        layers: list[nn.Module] = [nn.Conv2d(cfg.image_channels, base_width, 3, padding=1), nn.SiLU()]
        ch = base_width
        for _ in range(num_downs):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.SiLU()]
            ch *= 2
        self.body = nn.Sequential(*layers)
        self.out = zero_module(nn.Conv2d(ch, cfg.base_channels, 3, padding=1))
        self.expected_size = cfg.image_size

    def forward(self, x0: torch.Tensor) -> torch.Tensor:
        if x0.shape[-1] != self.expected_size or x0.shape[-2] != self.expected_size:
            raise ValueError(
                f"hint encoder expects {self.expected_size}x{self.expected_size} images, "
                f"got {tuple(x0.shape[-2:])}"
            )
        return self.out(self.body(x0))


class FusionUnit(nn.Module):
    """3x3 conv + normalization + activation, with spatial resampling to the target grid.

    The convolution is bias-free and zero-initialized: a freshly built unit
    maps anything to exactly zero.
    """

    def __init__(self, in_ch: int, out_ch: int, norm: str, act: str):
        super().__init__()
        self.conv = zero_module(nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False))
        if norm == "instance":
            self.norm = nn.InstanceNorm2d(out_ch, affine=True, track_running_stats=False)
        elif norm == "batch":
            self.norm = nn.BatchNorm2d(out_ch)
        else:
            raise ValueError(f"unknown norm {norm!r}")
        self.act = nn.SiLU() if act == "silu" else nn.ReLU()

    def forward(self, high: torch.Tensor, target_hw: tuple[int, int]) -> torch.Tensor:
        if high.shape[-2:] != target_hw:
            high = F.interpolate(high, size=target_hw, mode="bilinear", align_corners=False)
        return self.act(self.norm(self.conv(high)))


class FeatureFusion(nn.Module):
    """Adds every higher-scale sublayer feature into every lower-scale one.

    Given J high-scale layers H_j and L low-scale layers P_i, computes
    Q_i = P_i + sum_j F_ij(H_j) with one conv unit per (i, j) pair.
    """

    def __init__(self, high_channels: int, low_channels: int, norm: str = "instance",
                 act: str = "silu", num_layers: int = 3):
        super().__init__()
        self.num_layers = num_layers
        self.units = nn.ModuleList([
            nn.ModuleList([FusionUnit(high_channels, low_channels, norm, act) for _ in range(num_layers)])
            for _ in range(num_layers)
        ])

    def forward(self, high_layers: list[torch.Tensor], low_layers: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(high_layers) != self.num_layers or len(low_layers) != self.num_layers:
            raise ValueError(
                f"expected {self.num_layers} high- and low-scale layers, "
                f"got {len(high_layers)} and {len(low_layers)}"
            )
        fused = []
        for i, low in enumerate(low_layers):
            q = low
            for j, high in enumerate(high_layers):
                q = q + self.units[i][j](high, low.shape[-2:])
            fused.append(q)
        return fused


def sff_fuse(high_scale_layers, low_scale_layers, sff: FeatureFusion):
    """Functional form of the fusion block (validates layer counts/shapes)."""
    for i, low in enumerate(low_scale_layers):
        if low.shape[1] != sff.units[0][0].conv.out_channels:
            raise ValueError(f"low-scale layer {i} has wrong channel count {low.shape[1]}")
    return sff(list(high_scale_layers), list(low_scale_layers))


class GuidedDenoiser(nn.Module):
    """Frozen denoiser plus its trainable guidance clone and connections."""

    HIGH_LEVEL = 2  # fusion source (third encoder level)
    DEEP_LEVEL = 3  # fusion target and connected decoder level

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.sd = DenoisingUNet(config, seed=seed)
        w = config.widths
        with rng_seed(seed + 1):
            # trainable clones, parameter-identical to the frozen network
            self.sg_stem = copy.deepcopy(self.sd.stem)
            self.sg_enc_levels = build_encoder_levels(config)
            self.sg_middle = build_middle(config)
            self.sg_dec_block, _ = build_decoder_level(config, self.DEEP_LEVEL, w[-1])
            self.hint_encoder = HintEncoder(config)
            self.sff = FeatureFusion(w[self.HIGH_LEVEL], w[self.DEEP_LEVEL],
                                     norm=config.sff_norm, act=config.sff_act)
            self.mid_proj = zero_module(nn.Conv2d(w[-1], w[-1], 1))
            self.dec_proj = zero_module(nn.Conv2d(w[-1], w[-1], 1))
            n_subs = config.sublayers_per_level
            self.skip_projs = nn.ModuleDict({
                str(level): nn.ModuleList(
                    [zero_module(nn.Conv2d(w[level], w[level], 1)) for _ in range(n_subs)]
                )
                for level in (self.HIGH_LEVEL, self.DEEP_LEVEL)
            })
        self._copy_sd_into_sg()
        self.sd.requires_grad_(False)

    # ------------------------------------------------------------ setup

    def _copy_sd_into_sg(self) -> None:
        self.sg_stem.load_state_dict(self.sd.stem.state_dict())
        self.sg_enc_levels.load_state_dict(self.sd.enc_levels.state_dict())
        self.sg_middle.load_state_dict(self.sd.middle.state_dict())
        self.sg_dec_block.load_state_dict(self.sd.dec_levels[0].state_dict())

    def load_sd_state(self, state_dict: dict) -> None:
        """Install (pretrained) denoiser weights and re-clone them into the guide."""
        self.sd.load_state_dict(state_dict)
        self._copy_sd_into_sg()
        self.sd.requires_grad_(False)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        groups = {
            "sd": list(self.sd.parameters()),
            "sg": (
                list(self.sg_stem.parameters())
                + list(self.sg_enc_levels.parameters())
                + list(self.sg_middle.parameters())
                + list(self.sg_dec_block.parameters())
            ),
            "hint": list(self.hint_encoder.parameters()),
            "sff": list(self.sff.parameters()),
            "connections": (
                list(self.mid_proj.parameters())
                + list(self.dec_proj.parameters())
                + list(self.skip_projs.parameters())
            ),
        }
        return groups

    @property
    def frozen_flags(self) -> dict[str, bool]:
        return {"sd": True, "sg": False, "hint": False, "sff": False, "connections": False}

    def trainable_parameters(self) -> list[nn.Parameter]:
        groups = self.parameter_groups()
        return [p for name, ps in groups.items() if not self.frozen_flags[name] for p in ps]

    # ---------------------------------------------------------- forward

    def hint_embed(self, x0: torch.Tensor) -> torch.Tensor:
        xx = x0.unsqueeze(0) if x0.dim() == 3 else x0
        out = self.hint_encoder(xx)
        return out.squeeze(0) if x0.dim() == 3 else out

    def forward(
        self,
        z_t: torch.Tensor,
        t,
        x0: Optional[torch.Tensor],
        z_clean: Optional[torch.Tensor] = None,
        disable_sg: bool = False,
    ) -> torch.Tensor:
        squeeze = z_t.dim() == 3
        zz = z_t.unsqueeze(0) if squeeze else z_t
        temb = self.sd.embed_timestep(t, zz.shape[0], zz.dtype)

        h_sd = self.sd.stem(zz)
        h_sd, sd_levels = self.sd.encode(h_sd, temb)
        m_sd = self.sd.run_middle(h_sd, temb)

        variant = self.config.connection_variant
        if disable_sg or variant == "sd":
            return self._finish(m_sd, sd_levels, temb, None, squeeze)

        if x0 is None:
            raise ValueError("guided forward pass requires the conditioning image x0")
        xx0 = x0.unsqueeze(0) if x0.dim() == 3 else x0
        if xx0.shape[0] != zz.shape[0]:
            raise ValueError("batch sizes of z_t and x0 differ")

        z_sg = zz
        if self.config.sg_input_clean_latent and z_clean is not None:
            z_sg = z_clean.unsqueeze(0) if z_clean.dim() == 3 else z_clean
        enc_levels = self.sd.enc_levels if self.config.sg_uses_sd_encoder else self.sg_enc_levels
        stem = self.sd.stem if self.config.sg_uses_sd_encoder else self.sg_stem

        h_sg = stem(z_sg) + self.hint_encoder(xx0)
        sg_levels: list[list[torch.Tensor]] = []
        for level in enc_levels:
            outs = []
            for sub in level:
                h_sg = sub(h_sg, temb)
                outs.append(h_sg)
            sg_levels.append(outs)
        m_sg = self.sg_middle[0](h_sg, temb)
        m_sg = self.sg_middle[1](m_sg)
        m_sg = self.sg_middle[2](m_sg, temb)

        h = m_sd + self.mid_proj(m_sg)
        skip_offsets = None
        if variant == "msg+sgeb3+sgeb4":
            skip_offsets = {
                level: [proj(out) for proj, out in zip(self.skip_projs[str(level)], sg_levels[level])]
                for level in (self.HIGH_LEVEL, self.DEEP_LEVEL)
            }
        elif variant == "msg+sgdb":
            fused = self.sff(sg_levels[self.HIGH_LEVEL], sg_levels[self.DEEP_LEVEL])
            h_dec = m_sg
            for unit, skip in zip(self.sg_dec_block, reversed(fused)):
                h_dec = unit(h_dec, skip, temb)
            h = h + self.dec_proj(h_dec)

        return self._finish(h, sd_levels, temb, skip_offsets, squeeze)

    def _finish(self, h, sd_levels, temb, skip_offsets, squeeze):
        out = self.sd.decode(h, sd_levels, temb, skip_offsets)
        return out.squeeze(0) if squeeze else out


def build_assembly(config: DenoiserConfig, seed: int = 0) -> GuidedDenoiser:
    """Construct the frozen denoiser plus its guidance clone and connections."""
    return GuidedDenoiser(config, seed=seed)


def predict_noise(
    z_t: torch.Tensor,
    t,
    x0: Optional[torch.Tensor],
    assembly: GuidedDenoiser,
    z_clean: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Noise prediction of the full assembly for a (noisy latent, image) pair."""
    return assembly(z_t, t, x0, z_clean=z_clean)


# ------------------------------------------------------------ checkpoints


def _config_dict(cfg: DenoiserConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def save_assembly(path, assembly: GuidedDenoiser) -> None:
    """Store frozen and trainable groups separately, with frozen flags."""
    full = assembly.state_dict()
    sd_state = {k[len("sd."):]: v for k, v in full.items() if k.startswith("sd.")}
    sg_state = {k: v for k, v in full.items() if not k.startswith("sd.")}
    save_checkpoint(
        path,
        "assembly",
        _config_dict(assembly.config),
        {"sd": sd_state, "sg": sg_state},
        extra={"frozen": assembly.frozen_flags},
    )


def save_sd_unet(path, unet: DenoisingUNet) -> None:
    save_checkpoint(path, "assembly", _config_dict(unet.config), {"sd": unet.state_dict()})


def load_assembly(path) -> GuidedDenoiser | DenoisingUNet:
    """Load an assembly; a checkpoint without the guidance group loads as a plain denoiser."""
    payload = load_checkpoint(path, "assembly")
    cfg = DenoiserConfig(**payload["config"])
    states = payload["states"]
    if "sg" not in states:
        unet = DenoisingUNet(cfg)
        unet.load_state_dict(states["sd"])
        return unet
    assembly = GuidedDenoiser(cfg)
    assembly.sd.load_state_dict(states["sd"])
    assembly.load_state_dict({**{f"sd.{k}": v for k, v in states["sd"].items()}, **states["sg"]})
    assembly.sd.requires_grad_(False)
    return assembly
