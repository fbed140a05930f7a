"""Core diffusion mechanics: noise schedules, forward corruption, reverse steps.

All functions here are pure tensor math with no knowledge of any network.
They accept tensors of any rank and any float dtype; per-timestep
coefficients are looked up from the schedule's double-precision tables and
cast to the input dtype, so callers can trade precision for speed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables and derived constants for a T-step diffusion process.

    All arrays are float64 and have length T. ``alpha_bars`` is the running
    product of ``alphas`` and is strictly decreasing on (0, 1); ``sigmas``
    holds the reverse-step noise scale sqrt(beta_t).
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        if not ((self.alpha_bars > 0) & (self.alpha_bars < 1)).all():
            raise ValueError("alpha_bars must lie in (0, 1)")
        if self.T > 1 and not (np.diff(self.alpha_bars) < 0).all():
            raise ValueError("alpha_bars must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    def check_step(self, t: int) -> None:
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} out of range [0, {self.T})")


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build the linear beta schedule with endpoints included.

    Defaults are the standard linear-schedule endpoints; T=1000 with these
    defaults drives alpha_bar below 1e-2 at the final step.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta bounds must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = np.sqrt(betas)
    return NoiseSchedule(T=int(T), betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Corrupt z0 to its t-step noisy version: sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    schedule.check_step(t)
    _check_same_shape(z0, eps, "forward_diffuse")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def estimate_x0(z_t: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """One-shot clean-sample estimate (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t)."""
    schedule.check_step(t)
    _check_same_shape(z_t, eps, "estimate_x0")
    ab = schedule.alpha_bar(t)
    return (z_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


def ddpm_reverse_step(
    z_t: torch.Tensor,
    t: int,
    eps_pred: torch.Tensor,
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One ancestral reverse step with sigma_t = sqrt(beta_t).

    Returns (z_t - (1-a_t)/sqrt(1-ab_t) * eps_pred) / sqrt(a_t) + sigma_t * noise.
    """
    schedule.check_step(t)
    _check_same_shape(z_t, eps_pred, "ddpm_reverse_step")
    if noise is not None:
        _check_same_shape(z_t, noise, "ddpm_reverse_step noise")
        if t < 1 and bool((noise != 0).any()):
            raise ValueError("nonzero noise requires t >= 1")
    a = float(schedule.alphas[t])
    ab = schedule.alpha_bar(t)
    mean = (z_t - ((1.0 - a) / np.sqrt(1.0 - ab)) * eps_pred) / np.sqrt(a)
    if noise is None:
        return mean
    return mean + float(schedule.sigmas[t]) * noise


def ddim_timesteps(schedule: NoiseSchedule, num_steps: int, start_t: Optional[int] = None) -> list[int]:
    """Evenly spaced descending timestep subsequence, both endpoints included.

    ``start_t`` defaults to T-1. When num_steps exceeds the number of
    available timesteps it is clamped to start_t + 1.
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if num_steps > schedule.T:
        raise ValueError(f"num_steps {num_steps} exceeds schedule length {schedule.T}")
    if start_t is None:
        start_t = schedule.T - 1
    schedule.check_step(start_t)
    num_steps = min(num_steps, start_t + 1)
    if num_steps == 1:
        return [start_t]
    ts = np.linspace(start_t, 0, num_steps)
    return [int(round(v)) for v in ts]


def ddim_sample(
    z_T: torch.Tensor,
    predictor: Callable[[torch.Tensor, int, object], torch.Tensor],
    schedule: NoiseSchedule,
    num_steps: int,
    conditioning: object = None,
    start_t: Optional[int] = None,
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM trajectory; returns the final clean latent.

    At each visited timestep the clean latent is re-estimated from the
    predicted noise and re-noised to the next (smaller) timestep; the last
    estimate is returned. Repeated calls with identical inputs are
    bit-identical since no randomness is drawn.
    """
    steps = ddim_timesteps(schedule, num_steps, start_t)
    z = z_T
    x0_pred = z_T
    for i, t in enumerate(steps):
        eps = predictor(z, t, conditioning)
        if eps.shape != z.shape:
            raise ValueError(
                f"predictor output shape {tuple(eps.shape)} != latent shape {tuple(z.shape)}"
            )
        x0_pred = estimate_x0(z, t, eps, schedule)
        if i + 1 < len(steps):
            t_next = steps[i + 1]
            ab_next = schedule.alpha_bar(t_next)
            z = np.sqrt(ab_next) * x0_pred + np.sqrt(1.0 - ab_next) * eps
    return x0_pred


def training_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise."""
    _check_same_shape(eps, eps_pred, "training_loss")
    return torch.mean((eps - eps_pred) ** 2)
