"""Inference: diffusion reconstruction, anomaly maps, smoothing, image scores.

Map-space operations run in float64 numpy; the cosine maps are computed on
unit-normalized channel vectors so they are invariant to positive scaling
of either feature grid.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .autoencoder import KLAutoencoder
from .backbone import FeaturePyramid, extract_features
from .data import write_float_grid
from .diffusion import NoiseSchedule, ddim_sample, forward_diffuse
from .guidance import GuidedDenoiser
from .training import derive_seed


@dataclass
class ScoringConfig:
    feature_levels: tuple[int, ...] = (2, 3, 4)
    sigma: float = 5.0
    pool_iterations: int = 8
    pool_kernel: int = 8
    forward_t: Optional[int] = None  # None = full schedule length
    ddim_steps: int = 10
    pool_stride_equals_kernel: bool = False
    backbone: str = "toy"
    seed: int = 0

    def __post_init__(self):
        self.feature_levels = tuple(self.feature_levels)
        if not self.feature_levels:
            raise ValueError("feature_levels must not be empty")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.pool_iterations < 1 or self.pool_kernel < 1:
            raise ValueError("pooling iterations and kernel must be >= 1")


@dataclass
class AnomalyResult:
    pixel_map: np.ndarray
    image_score: float
    reconstruction: torch.Tensor
    per_scale_maps: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.image_score > float(self.pixel_map.max()) + 1e-9:
            raise ValueError("image_score exceeds the pixel map maximum")


# ----------------------------------------------------------- map algebra


def anomaly_map_per_scale(feat_a: torch.Tensor, feat_b: torch.Tensor) -> np.ndarray:
    """1 - cosine similarity between channel vectors at each location.

    Cosines are taken between unit-normalized vectors, so scaling either
    grid by a positive constant leaves the map unchanged. Zero-vector
    conventions: both zero -> similarity 1 (no anomaly), exactly one zero
    -> similarity 0 (full unit anomaly).
    """
    if feat_a.shape != feat_b.shape:
        raise ValueError(f"feature shapes differ: {tuple(feat_a.shape)} vs {tuple(feat_b.shape)}")
    a = feat_a.detach().to(torch.float64).numpy()
    b = feat_b.detach().to(torch.float64).numpy()
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    both_zero = (na == 0.0) & (nb == 0.0)
    one_zero = ((na == 0.0) | (nb == 0.0)) & ~both_zero
    ua = a / np.maximum(na, 1e-300)
    ub = b / np.maximum(nb, 1e-300)
    cos = np.clip((ua * ub).sum(axis=0), -1.0, 1.0)
    cos = np.where(both_zero, 1.0, cos)
    cos = np.where(one_zero, 0.0, cos)
    return 1.0 - cos


def aggregate_maps(per_scale: Sequence[np.ndarray], target: tuple[int, int]) -> np.ndarray:
    """Bilinearly upsample each map to the target grid and sum with unit weights."""
    if len(per_scale) == 0:
        raise ValueError("no per-scale maps selected")
    total = np.zeros(target, dtype=np.float64)
    for m in per_scale:
        t = torch.from_numpy(np.asarray(m, dtype=np.float64)).unsqueeze(0).unsqueeze(0)
        up = F.interpolate(t, size=target, mode="bilinear", align_corners=False)
        total += up.squeeze(0).squeeze(0).numpy()
    return total


def gaussian_smooth(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian filter, kernel radius ceil(4*sigma), reflect padding."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    grid = np.asarray(grid, dtype=np.float64)
    radius = int(np.ceil(4 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs**2) / (2 * sigma**2))
    kernel /= kernel.sum()
    padded = np.pad(grid, ((radius, radius), (0, 0)), mode="reflect")
    out = np.zeros_like(grid)
    for i in range(grid.shape[0]):
        out[i] = kernel @ padded[i : i + 2 * radius + 1]
    padded = np.pad(out, ((0, 0), (radius, radius)), mode="reflect")
    out2 = np.zeros_like(grid)
    for j in range(grid.shape[1]):
        out2[:, j] = padded[:, j : j + 2 * radius + 1] @ kernel
    return out2


def _mean_filter(grid: np.ndarray, kernel: int) -> np.ndarray:
    if kernel == 1:
        return grid
    top = (kernel - 1) // 2
    bottom = kernel - 1 - top
    padded = np.pad(grid, ((top, bottom), (top, bottom)), mode="reflect")
    s = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.float64)
    s[1:, 1:] = padded.cumsum(axis=0).cumsum(axis=1)
    h, w = grid.shape
    k = kernel
    return (s[k : k + h, k : k + w] - s[0:h, k : k + w] - s[k : k + h, 0:w] + s[0:h, 0:w]) / (k * k)


def image_score(
    grid: np.ndarray,
    iterations: int,
    kernel: int,
    stride_equals_kernel: bool = False,
) -> float:
    """Iterated kernel-sized mean filtering followed by the global maximum.

    The default reading filters with stride 1 (map size preserved); the
    alternative reading pools with stride equal to the kernel, shrinking
    the map and stopping early once it is smaller than the kernel.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if kernel > min(grid.shape):
        raise ValueError(f"kernel {kernel} larger than map {grid.shape}")
    g = grid
    for _ in range(iterations):
        if stride_equals_kernel:
            if min(g.shape) < kernel:
                break
            h, w = (g.shape[0] // kernel) * kernel, (g.shape[1] // kernel) * kernel
            g = g[:h, :w].reshape(h // kernel, kernel, w // kernel, kernel).mean(axis=(1, 3))
        else:
            g = _mean_filter(g, kernel)
    return float(g.max())


# ----------------------------------------------------------- inference


def reconstruct(
    x0: torch.Tensor,
    assembly: GuidedDenoiser,
    autoencoder: KLAutoencoder,
    schedule: NoiseSchedule,
    forward_t: Optional[int] = None,
    ddim_steps: int = 10,
    seed: int = 0,
) -> torch.Tensor:
    """Corrupt the latent of x0 and denoise it back under the image's guidance."""
    forward_t = schedule.T if forward_t is None else forward_t
    if not 1 <= forward_t <= schedule.T:
        raise ValueError(f"forward_t must be in [1, {schedule.T}], got {forward_t}")
    with torch.no_grad():
        z0, _ = autoencoder.encode(x0)
        gen = torch.Generator().manual_seed(seed)
        eps = torch.randn(z0.shape, generator=gen)
        z_start = forward_diffuse(z0, forward_t - 1, eps, schedule)

        def predictor(z, t, conditioning):
            return assembly(z, t, conditioning)

        z_hat = ddim_sample(
            z_start, predictor, schedule, ddim_steps, conditioning=x0, start_t=forward_t - 1
        )
        return autoencoder.decode(z_hat)


def score_image(
    x0: torch.Tensor,
    assembly: GuidedDenoiser,
    autoencoder: KLAutoencoder,
    schedule: NoiseSchedule,
    backbone,
    config: ScoringConfig,
    seed: Optional[int] = None,
    reconstruction: Optional[torch.Tensor] = None,
) -> AnomalyResult:
    """Full scoring pipeline for one image.

    An externally supplied reconstruction (e.g. a cached one during
    ablation sweeps) bypasses the diffusion pass.
    """
    if reconstruction is None:
        reconstruction = reconstruct(
            x0, assembly, autoencoder, schedule,
            forward_t=config.forward_t, ddim_steps=config.ddim_steps,
            seed=config.seed if seed is None else seed,
        )
    pyr_in = extract_features(x0, backbone)
    pyr_rec = extract_features(reconstruction, backbone)
    per_scale = [
        anomaly_map_per_scale(pyr_in.level(n), pyr_rec.level(n)) for n in config.feature_levels
    ]
    target = tuple(x0.shape[-2:])
    aggregated = aggregate_maps(per_scale, target)
    smoothed = gaussian_smooth(aggregated, config.sigma)
    score = image_score(
        smoothed, config.pool_iterations, config.pool_kernel,
        stride_equals_kernel=config.pool_stride_equals_kernel,
    )
    return AnomalyResult(
        pixel_map=smoothed,
        image_score=score,
        reconstruction=reconstruction,
        per_scale_maps=per_scale,
    )


def image_seed(base_seed: int, path: str) -> int:
    """Per-image reconstruction seed, stable across runs and scoring order."""
    return derive_seed(base_seed, zlib.crc32(path.encode()))


# ----------------------------------------------------------- persistence


def save_heatmap_png(path, grid: np.ndarray) -> None:
    """8-bit magma rendering of a map, normalized to its own range."""
    import matplotlib.cm as cm

    g = np.asarray(grid, dtype=np.float64)
    rng = g.max() - g.min()
    norm = (g - g.min()) / rng if rng > 0 else np.zeros_like(g)
    rgba = (cm.magma(norm) * 255).astype(np.uint8)
    Image.fromarray(rgba[..., :3]).save(path)


def save_result(out_dir, name: str, result: AnomalyResult, config_hash: str = "") -> None:
    """Persist reconstruction PNG, float map grid, heatmap, and a manifest row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rec = (result.reconstruction.clamp(0, 1) * 255).to(torch.uint8).permute(1, 2, 0).numpy()
    Image.fromarray(rec).save(out / f"{name}_reconstruction.png")
    write_float_grid(out / f"{name}_map.fgrd", result.pixel_map.astype(np.float32))
    save_heatmap_png(out / f"{name}_heatmap.png", result.pixel_map)
    manifest = out / "scores.csv"
    new = not manifest.exists()
    with open(manifest, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["name", "image_score", "config_hash"])
        writer.writerow([name, f"{result.image_score:.9g}", config_hash])
