"""Run configuration: presets, file loading, flag overrides, hashing."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .autoencoder import AutoencoderConfig, AutoencoderTrainConfig
from .data import SyntheticSpec
from .diffusion import NoiseSchedule, build_linear_schedule
from .metrics import EvalConfig
from .scoring import ScoringConfig
from .training import TrainConfig
from .unet import DenoiserConfig

PRESETS = ("desk", "paper-reference")


def load_preset(name: str) -> dict:
    filename = {"desk": "desk.yaml", "paper-reference": "paper_reference.yaml"}.get(name)
    if filename is None:
        raise ValueError(f"unknown preset {name!r}; available: {PRESETS}")
    text = resources.files("latentad.presets").joinpath(filename).read_text()
    return yaml.safe_load(text)


def load_config_file(path) -> dict:
    with open(path) as fh:
        cfg = yaml.safe_load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"config file {path} must contain a mapping")
    return cfg


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply dotted-path overrides like scoring.ddim_steps=50."""
    out = json.loads(json.dumps(cfg))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = out
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"cannot override through non-mapping at {p!r}")
        node[leaf] = value
    return out


def resolve_config(
    preset: str = "desk",
    config_file: Optional[str] = None,
    overrides: Optional[list[str]] = None,
) -> dict:
    cfg = load_preset(preset)
    if config_file:
        cfg = deep_merge(cfg, load_config_file(config_file))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def save_resolved_config(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)
    return path


# ------------------------------------------------- typed section builders


def _tupled(d: dict, *keys: str) -> dict:
    out = dict(d)
    for k in keys:
        if k in out and out[k] is not None:
            out[k] = tuple(out[k])
    return out


def autoencoder_config(cfg: dict) -> AutoencoderConfig:
    return AutoencoderConfig(**_tupled(cfg["model"]["autoencoder"], "channel_multipliers"))


def denoiser_config(cfg: dict, num_classes: Optional[int] = None) -> DenoiserConfig:
    d = _tupled(cfg["model"]["denoiser"], "channel_multipliers", "attention_levels")
    if num_classes is not None:
        d["num_classes"] = num_classes
    return DenoiserConfig(**d)


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    s = cfg["model"]["schedule"]
    return build_linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    spec = cfg["dataset"].get("synthetic")
    if spec is None:
        raise ValueError("config has no dataset.synthetic section")
    return SyntheticSpec(**_tupled(spec, "textures", "defects"))


def autoencoder_train_config(cfg: dict) -> AutoencoderTrainConfig:
    return AutoencoderTrainConfig(**cfg["training"]["autoencoder"])


def phase_train_config(cfg: dict, phase: str) -> TrainConfig:
    return TrainConfig(phase=phase, **cfg["training"][phase])


def scoring_config(cfg: dict) -> ScoringConfig:
    return ScoringConfig(**_tupled(cfg["scoring"], "feature_levels"))


def eval_config(cfg: dict) -> EvalConfig:
    section = cfg.get("evaluation", {})
    return EvalConfig(
        fpr_limit=float(section.get("fpr_limit", 0.3)),
        pixel_mode=section.get("pixel_mode", "pooled"),
    )
