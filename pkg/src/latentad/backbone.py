"""Feature extractors producing five-level pyramids for anomaly scoring.

The built-in backbone is a small frozen CNN with seed-fixed weights and
the standard stride schedule (each level halves the previous one), so
acceptance runs never depend on downloaded weights. Any module returning
five feature maps with that schedule can be plugged in instead, e.g. a
torchvision ResNet wrapped to return its stage outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import group_norm, rng_seed


@dataclass
class FeaturePyramid:
    """Ordered per-scale feature maps f1..f5 with strictly decreasing extents."""

    levels: list[torch.Tensor]

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"expected 5 pyramid levels, got {len(self.levels)}")
        sizes = [tuple(l.shape[-2:]) for l in self.levels]
        for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
            if not (h1 < h0 and w1 < w0):
                raise ValueError(f"pyramid spatial dims must strictly decrease, got {sizes}")
            if abs(h1 - h0 / 2) > 1 or abs(w1 - w0 / 2) > 1:
                raise ValueError(f"pyramid levels must halve within rounding, got {sizes}")

    def level(self, n: int) -> torch.Tensor:
        """1-indexed accessor: level(2) is f2."""
        if not 1 <= n <= 5:
            raise ValueError(f"feature level {n} out of range 1..5")
        return self.levels[n - 1]


class ToyBackbone(nn.Module):
    """Five stride-2 conv stages with fixed random weights; frozen and deterministic."""

    WIDTHS = (16, 32, 64, 96, 128)

    def __init__(self, seed: int = 0):
        super().__init__()
        with rng_seed(seed):
            stages = []
            prev = 3
            for w in self.WIDTHS:
                stages.append(nn.Sequential(nn.Conv2d(prev, w, 3, stride=2, padding=1), group_norm(w), nn.SiLU()))
                prev = w
            self.stages = nn.ModuleList(stages)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


def get_backbone(name: str = "toy", seed: int = 0) -> nn.Module:
    if name == "toy":
        return ToyBackbone(seed=seed)
    raise ValueError(f"unknown backbone {name!r}; pass a module instance for custom extractors")


def extract_features(image: torch.Tensor, backbone: nn.Module) -> FeaturePyramid:
    """Run the extractor on one (3, H, W) image; pure given a fixed backbone."""
    if image.dim() != 3:
        raise ValueError(f"expected a rank-3 image, got rank {image.dim()}")
    if image.shape[-1] < 32 or image.shape[-2] < 32:
        raise ValueError(f"image {tuple(image.shape[-2:])} too small for a 5-level pyramid")
    with torch.no_grad():
        feats = backbone(image.unsqueeze(0))
    return FeaturePyramid(levels=[f.squeeze(0) for f in feats])
