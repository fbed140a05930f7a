"""Two-phase diffusion training: unconditional pretraining, then guided training.

Every random draw (data order, timesteps, noise) comes from a generator
seeded as a pure function of (seed, phase, epoch, step), so a resumed run
reproduces the uninterrupted loss curve exactly. Checkpoints carry the
optimizer state and epoch counter alongside the parameters.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch

from .autoencoder import KLAutoencoder
from .ckpt import load_checkpoint, save_checkpoint
from .diffusion import NoiseSchedule
from .guidance import GuidedDenoiser
from .unet import DenoisingUNet

PHASES = ("train_autoencoder", "pretrain_sd", "train_sg")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    grad_accumulation: int = 1
    seed: int = 0
    phase: str = "train_sg"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.grad_accumulation < 1:
            raise ValueError("epochs, batch_size and grad_accumulation must be >= 1")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")


def derive_seed(*parts: int) -> int:
    h = 0
    for p in parts:
        h = (h * 1000003 + int(p) + 0x9E3779B9) % (2**63)
    return h


def draw_timesteps(T: int, n: int, generator: torch.Generator) -> torch.Tensor:
    """Uniform timestep draws over [0, T)."""
    return torch.randint(0, T, (n,), generator=generator)


class DiffusionTrainer:
    """Optimizes the noise-prediction loss for one phase.

    In phase ``pretrain_sd`` the plain denoiser is trained unconditionally;
    in ``train_sg`` the assembly's guidance parameters are trained while
    the frozen group must stay untouched (checked after every backward).
    """

    def __init__(
        self,
        model: DenoisingUNet | GuidedDenoiser,
        autoencoder: KLAutoencoder,
        schedule: NoiseSchedule,
        config: TrainConfig,
    ):
        self.model = model
        self.autoencoder = autoencoder
        self.schedule = schedule
        self.config = config
        if config.phase == "pretrain_sd":
            if not isinstance(model, DenoisingUNet):
                raise ValueError("pretrain_sd expects a plain denoiser")
            model.requires_grad_(True)
            params = list(model.parameters())
        elif config.phase == "train_sg":
            if not isinstance(model, GuidedDenoiser):
                raise ValueError("train_sg expects a guided assembly")
            params = model.trainable_parameters()
        else:
            raise ValueError(f"trainer does not handle phase {config.phase!r}")
        self.optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=0.0)
        self._alpha_bars = torch.tensor(schedule.alpha_bars, dtype=torch.float32)
        self._accum = 0

    def _phase_code(self) -> int:
        return PHASES.index(self.config.phase)

    def step(self, batch_x0: torch.Tensor, epoch: int, step_idx: int) -> float:
        """One optimization (micro-)step on a batch of clean images."""
        gen = torch.Generator().manual_seed(
            derive_seed(self.config.seed, self._phase_code(), epoch, step_idx)
        )
        with torch.no_grad():
            z0, _ = self.autoencoder.encode(batch_x0)
        b = z0.shape[0]
        t = draw_timesteps(self.schedule.T, b, gen)
        eps = torch.randn(z0.shape, generator=gen)
        ab = self._alpha_bars[t].view(b, 1, 1, 1)
        z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps

        if self.config.phase == "pretrain_sd":
            eps_pred = self.model(z_t, t)
        else:
            eps_pred = self.model(z_t, t, batch_x0)
        loss = torch.mean((eps - eps_pred) ** 2)
        if not torch.isfinite(loss):
            raise RuntimeError(
                f"non-finite training loss at phase={self.config.phase} "
                f"epoch={epoch} step={step_idx}"
            )
        (loss / self.config.grad_accumulation).backward()
        if self.config.phase == "train_sg":
            leaked = [
                n for n, p in self.model.sd.named_parameters() if p.grad is not None
            ]
            assert not leaked, f"gradient leaked into frozen parameters: {leaked[:3]}"
        self._accum += 1
        if self._accum >= self.config.grad_accumulation:
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
            self._accum = 0
        return float(loss.item())


def _epoch_permutation(n: int, seed: int, phase: str, epoch: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(derive_seed(seed, PHASES.index(phase), epoch, 1 << 40))
    return torch.randperm(n, generator=gen)


def train_phase(
    trainer: DiffusionTrainer,
    images: torch.Tensor,
    checkpoint_path: Optional[Path] = None,
    log_path: Optional[Path] = None,
    start_epoch: int = 0,
    max_steps: Optional[int] = None,
) -> list[dict]:
    """Run the configured number of epochs; returns per-step log records."""
    cfg = trainer.config
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty training corpus")
    records = []
    total_steps = 0
    for epoch in range(start_epoch, cfg.epochs):
        perm = _epoch_permutation(n, cfg.seed, cfg.phase, epoch)
        for step_idx, start in enumerate(range(0, n, cfg.batch_size)):
            batch = images[perm[start : start + cfg.batch_size]]
            loss = trainer.step(batch, epoch, step_idx)
            rec = {
                "phase": cfg.phase,
                "epoch": epoch,
                "step": step_idx,
                "loss": loss,
                "time": time.time(),
            }
            records.append(rec)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(rec) + "\n")
            total_steps += 1
            if max_steps is not None and total_steps >= max_steps:
                break
        if checkpoint_path is not None:
            _save_phase_checkpoint(checkpoint_path, trainer, epoch + 1)
        if max_steps is not None and total_steps >= max_steps:
            break
    return records


def _save_phase_checkpoint(path: Path, trainer: DiffusionTrainer, next_epoch: int) -> None:
    from .guidance import save_assembly, save_sd_unet

    cfg = trainer.config
    if cfg.phase == "pretrain_sd":
        save_sd_unet(path, trainer.model)
    else:
        save_assembly(path, trainer.model)
    # amend with resume state
    payload = load_checkpoint(path)
    payload["extra"].update({
        "train_config": asdict(cfg),
        "next_epoch": next_epoch,
        "optimizer": trainer.optimizer.state_dict(),
    })
    torch.save(payload, path)


def resume_epoch(path) -> int:
    payload = load_checkpoint(path)
    return int(payload["extra"].get("next_epoch", 0))


def load_optimizer_state(path, trainer: DiffusionTrainer) -> None:
    payload = load_checkpoint(path)
    state = payload["extra"].get("optimizer")
    if state is not None:
        trainer.optimizer.load_state_dict(state)
