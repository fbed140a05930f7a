"""End-to-end orchestration: dataset prep, phased training, evaluation, sweeps.

A run directory contains:

    config.yaml                 resolved configuration (hash-stamped)
    checkpoints/autoencoder.pt
    checkpoints/sd_unet.pt      unconditional pretraining result
    checkpoints/assembly.pt     guided assembly after the final phase
    logs/train.jsonl            per-step loss records for every phase
    eval/report.{csv,md}        metric tables
    eval/scores.csv             per-image scores with the config hash
    ablations/<study>.{csv,png}
"""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import config as cfg_mod
from .autoencoder import KLAutoencoder, load_autoencoder, train_autoencoder
from .backbone import get_backbone
from .ckpt import load_checkpoint
from .data import (
    DatasetManifest,
    generate_synthetic,
    load_image,
    load_mask,
    scan_mvtec_layout,
)
from .guidance import GuidedDenoiser, build_assembly, load_assembly, save_assembly
from .metrics import EvalRecord, MetricsReport, evaluate_dataset
from .scoring import ScoringConfig, image_seed, save_result, score_image
from .training import DiffusionTrainer, load_optimizer_state, resume_epoch, train_phase
from .unet import DenoisingUNet

CHECKPOINT_FILES = {
    "train_autoencoder": "autoencoder.pt",
    "pretrain_sd": "sd_unet.pt",
    "train_sg": "assembly.pt",
}
PHASE_ORDER = ("train_autoencoder", "pretrain_sd", "train_sg")


# ------------------------------------------------------------- dataset


def dataset_root(cfg: dict, out_root: Path) -> Path:
    root = cfg["dataset"].get("root")
    return Path(root) if root else out_root / "synthetic"


def ensure_dataset(cfg: dict, out_root: Path) -> DatasetManifest:
    """Scan the configured dataset, generating the synthetic corpus if needed."""
    root = dataset_root(cfg, out_root)
    if not root.exists() and cfg["dataset"].get("synthetic"):
        generate_synthetic(cfg_mod.synthetic_spec(cfg), root)
    return scan_mvtec_layout(root)


def load_split_images(manifest: DatasetManifest, split: str, size: int) -> torch.Tensor:
    entries = manifest.select(split=split)
    if not entries:
        raise ValueError(f"no {split} images in dataset")
    return torch.stack([load_image(e.path, (size, size)) for e in entries])


# ------------------------------------------------------------- training


def run_training(
    cfg: dict,
    out_root: Path,
    phases: Optional[list[str]] = None,
    resume: bool = False,
) -> dict[str, Path]:
    """Execute the requested phases in order, enforcing prerequisites."""
    phases = list(phases or PHASE_ORDER)
    for p in phases:
        if p not in PHASE_ORDER:
            raise ValueError(f"unknown phase {p!r}")
    phases.sort(key=PHASE_ORDER.index)
    ckpt_dir = out_root / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_dir = out_root / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    log_path = log_dir / "train.jsonl"

    manifest = ensure_dataset(cfg, out_root)
    size = int(cfg["dataset"]["image_size"])
    images = load_split_images(manifest, "train", size)
    schedule = cfg_mod.schedule_from_config(cfg)
    paths = {p: ckpt_dir / CHECKPOINT_FILES[p] for p in PHASE_ORDER}

    def require(phase: str) -> None:
        prior = PHASE_ORDER[: PHASE_ORDER.index(phase)]
        for p in prior:
            if not paths[p].exists():
                raise FileNotFoundError(
                    f"phase {phase} requires the {p} checkpoint {paths[p]}; "
                    "run the earlier phase first"
                )

    if "train_autoencoder" in phases:
        ae_cfg = cfg_mod.autoencoder_config(cfg)
        ae_tc = cfg_mod.autoencoder_train_config(cfg)
        model = None
        start_epoch = 0
        optimizer_state = None
        if resume and paths["train_autoencoder"].exists():
            model = load_autoencoder(paths["train_autoencoder"])
            payload = load_checkpoint(paths["train_autoencoder"], "autoencoder")
            start_epoch = int(payload["extra"].get("next_epoch", 0))
            optimizer_state = payload["extra"].get("optimizer")
        train_autoencoder(
            images, ae_cfg, ae_tc,
            checkpoint_path=paths["train_autoencoder"], log_path=log_path, model=model,
            start_epoch=start_epoch, optimizer_state=optimizer_state,
        )

    if "pretrain_sd" in phases:
        require("pretrain_sd")
        autoencoder = load_autoencoder(paths["train_autoencoder"])
        tc = cfg_mod.phase_train_config(cfg, "pretrain_sd")
        start_epoch = 0
        if resume and paths["pretrain_sd"].exists():
            model = load_assembly(paths["pretrain_sd"])
            start_epoch = resume_epoch(paths["pretrain_sd"])
        else:
            model = DenoisingUNet(cfg_mod.denoiser_config(cfg), seed=tc.seed)
        trainer = DiffusionTrainer(model, autoencoder, schedule, tc)
        if start_epoch:
            load_optimizer_state(paths["pretrain_sd"], trainer)
        train_phase(trainer, images, checkpoint_path=paths["pretrain_sd"],
                    log_path=log_path, start_epoch=start_epoch)

    if "train_sg" in phases:
        require("train_sg")
        autoencoder = load_autoencoder(paths["train_autoencoder"])
        tc = cfg_mod.phase_train_config(cfg, "train_sg")
        start_epoch = 0
        if resume and paths["train_sg"].exists():
            assembly = load_assembly(paths["train_sg"])
            start_epoch = resume_epoch(paths["train_sg"])
        else:
            assembly = build_assembly(cfg_mod.denoiser_config(cfg), seed=tc.seed)
            sd_payload = load_checkpoint(paths["pretrain_sd"], "assembly")
            assembly.load_sd_state(sd_payload["states"]["sd"])
        trainer = DiffusionTrainer(assembly, autoencoder, schedule, tc)
        if start_epoch:
            load_optimizer_state(paths["train_sg"], trainer)
        train_phase(trainer, images, checkpoint_path=paths["train_sg"],
                    log_path=log_path, start_epoch=start_epoch)

    return paths


def load_trained(out_root: Path) -> tuple[KLAutoencoder, GuidedDenoiser]:
    ckpt_dir = out_root / "checkpoints"
    autoencoder = load_autoencoder(ckpt_dir / "autoencoder.pt")
    assembly = load_assembly(ckpt_dir / "assembly.pt")
    if not isinstance(assembly, GuidedDenoiser):
        raise ValueError("assembly checkpoint is missing the guidance group")
    autoencoder.eval()
    assembly.eval()
    return autoencoder, assembly


# ------------------------------------------------------------ evaluation


class ReconstructionCache:
    """Reuses reconstructions across sweep points that share diffusion settings."""

    def __init__(self):
        self._store: dict[tuple, torch.Tensor] = {}

    def get(self, key: tuple) -> Optional[torch.Tensor]:
        return self._store.get(key)

    def put(self, key: tuple, value: torch.Tensor) -> None:
        self._store[key] = value


def score_test_split(
    cfg: dict,
    manifest: DatasetManifest,
    autoencoder: KLAutoencoder,
    assembly: GuidedDenoiser,
    scoring_cfg: ScoringConfig,
    cache: Optional[ReconstructionCache] = None,
    heatmap_dir: Optional[Path] = None,
    config_hash: str = "",
) -> list[EvalRecord]:
    """Score every test image sequentially (deterministic order and seeds)."""
    schedule = cfg_mod.schedule_from_config(cfg)
    size = int(cfg["dataset"]["image_size"])
    backbone = get_backbone(scoring_cfg.backbone, seed=scoring_cfg.seed)
    root = dataset_root(cfg, Path("."))
    records = []
    for e in manifest.select(split="test"):
        x0 = load_image(e.path, (size, size))
        rel = str(Path(e.path).name) + "/" + e.category + "/" + e.defect_type
        seed = image_seed(scoring_cfg.seed, rel)
        rec_key = (rel, scoring_cfg.forward_t, scoring_cfg.ddim_steps, seed)
        reconstruction = cache.get(rec_key) if cache else None
        result = score_image(
            x0, assembly, autoencoder, schedule, backbone, scoring_cfg,
            seed=seed, reconstruction=reconstruction,
        )
        if cache and reconstruction is None:
            cache.put(rec_key, result.reconstruction)
        mask = (
            load_mask(e.mask_path, (size, size)).numpy().astype(int)
            if e.mask_path
            else np.zeros((size, size), dtype=int)
        )
        records.append(EvalRecord(
            image_score=result.image_score,
            pixel_map=result.pixel_map,
            gt_label=int(mask.any()),
            gt_mask=mask,
            category=e.category,
            path=e.path,
        ))
        if heatmap_dir is not None:
            name = f"{e.category}_{e.defect_type}_{Path(e.path).stem}"
            save_result(heatmap_dir, name, result, config_hash)
    return records


def run_evaluation(
    cfg: dict,
    out_root: Path,
    heatmaps: bool = False,
    scoring_cfg: Optional[ScoringConfig] = None,
    cache: Optional[ReconstructionCache] = None,
) -> tuple[MetricsReport, list[EvalRecord]]:
    manifest = ensure_dataset(cfg, out_root)
    autoencoder, assembly = load_trained(out_root)
    scoring_cfg = scoring_cfg or cfg_mod.scoring_config(cfg)
    chash = cfg_mod.config_hash(cfg)
    eval_dir = out_root / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    records = score_test_split(
        cfg, manifest, autoencoder, assembly, scoring_cfg, cache=cache,
        heatmap_dir=eval_dir / "heatmaps" if heatmaps else None, config_hash=chash,
    )
    report = evaluate_dataset(records, cfg_mod.eval_config(cfg))
    report.metadata["config_hash"] = chash
    report.to_csv(eval_dir / "report.csv")
    (eval_dir / "report.md").write_text(report.to_markdown() + "\n")
    with open(eval_dir / "scores.csv", "w") as fh:
        fh.write("path,category,defect_type,image_score,config_hash\n")
        for r, e in zip(records, manifest.select(split="test")):
            fh.write(f"{e.path},{e.category},{e.defect_type},{r.image_score:.9g},{chash}\n")
    return report, records


# ------------------------------------------------------------- ablation

POOLING_GRID = ((1, 16), (4, 16), (5, 12), (6, 10), (8, 8), (10, 7), (15, 5), (20, 4))
FEATURE_LAYER_GRID = (
    (1, 2, 3, 4, 5),
    (1, 2, 3, 4),
    (2, 3, 4, 5),
    (1, 2, 3),
    (2, 3, 4),
    (2, 3),
    (3, 4),
)


def _sweep_report_rows(cfg, out_root, sweep, cache) -> list[dict]:
    rows = []
    for label, scoring_cfg in sweep:
        t0 = time.time()
        report, _ = run_evaluation(cfg, out_root, scoring_cfg=scoring_cfg, cache=cache)
        row = report.row("all")
        rows.append({
            "point": label,
            "image_auroc": row.image_auroc,
            "pixel_auroc": row.pixel_auroc,
            "image_ap": row.image_ap,
            "pixel_ap": row.pixel_ap,
            "pro": row.pro,
            "wall_time_s": time.time() - t0,
        })
    return rows


def run_ablation(cfg: dict, out_root: Path, study: str, points=None) -> list[dict]:
    """One evaluation per sweep point; returns rows and writes CSV + plot."""
    base = cfg_mod.scoring_config(cfg)
    cache = ReconstructionCache()
    if study == "ddim_steps":
        values = points or (1, 5, 10, 20, 50)
        sweep = [(str(v), replace(base, ddim_steps=int(v))) for v in values]
    elif study == "forward_t":
        T = int(cfg["model"]["schedule"]["T"])
        values = points or (T // 10, T)
        sweep = [(str(v), replace(base, forward_t=int(v))) for v in values]
    elif study == "feature_layers":
        values = points or FEATURE_LAYER_GRID
        sweep = [
            ("+".join(map(str, v)), replace(base, feature_levels=tuple(v))) for v in values
        ]
    elif study == "pooling":
        values = points or POOLING_GRID
        sweep = [
            (f"{m}-{n}", replace(base, pool_iterations=int(m), pool_kernel=int(n)))
            for m, n in values
        ]
    elif study in ("connection_variant", "norm_activation"):
        return _run_retraining_ablation(cfg, out_root, study, points)
    else:
        raise ValueError(f"unknown ablation study {study!r}")
    rows = _sweep_report_rows(cfg, out_root, sweep, cache)
    _write_ablation_outputs(out_root, study, rows)
    return rows


def _run_retraining_ablation(cfg, out_root: Path, study: str, points=None) -> list[dict]:
    """Variants that change the assembly itself retrain the guidance phase."""
    if study == "connection_variant":
        values = points or ("msg", "msg+sgeb3+sgeb4", "msg+sgdb")
        variants = [(v, {"connection_variant": v}) for v in values]
    else:
        variants = [
            ("bn_relu", {"sff_norm": "batch", "sff_act": "relu"}),
            ("in_silu", {"sff_norm": "instance", "sff_act": "silu"}),
        ]
    rows = []
    for label, model_overrides in variants:
        sub_cfg = cfg_mod.deep_merge(cfg, {"model": {"denoiser": model_overrides}})
        sub_root = out_root / "ablations" / study / label
        sub_root.mkdir(parents=True, exist_ok=True)
        # reuse the expensive phases; retrain only the guidance network
        _link_shared_checkpoints(out_root, sub_root)
        t0 = time.time()
        run_training(sub_cfg, sub_root, phases=["train_sg"])
        report, _ = run_evaluation(sub_cfg, sub_root)
        row = report.row("all")
        rows.append({
            "point": label,
            "image_auroc": row.image_auroc,
            "pixel_auroc": row.pixel_auroc,
            "image_ap": row.image_ap,
            "pixel_ap": row.pixel_ap,
            "pro": row.pro,
            "wall_time_s": time.time() - t0,
        })
    _write_ablation_outputs(out_root, study, rows)
    return rows


def _link_shared_checkpoints(src_root: Path, dst_root: Path) -> None:
    import shutil

    src = src_root / "checkpoints"
    dst = dst_root / "checkpoints"
    dst.mkdir(parents=True, exist_ok=True)
    for name in ("autoencoder.pt", "sd_unet.pt"):
        if (src / name).exists() and not (dst / name).exists():
            shutil.copy2(src / name, dst / name)
    # the synthetic corpus is shared as well
    if (src_root / "synthetic").exists() and not (dst_root / "synthetic").exists():
        shutil.copytree(src_root / "synthetic", dst_root / "synthetic")


def _write_ablation_outputs(out_root: Path, study: str, rows: list[dict]) -> None:
    ab_dir = out_root / "ablations"
    ab_dir.mkdir(parents=True, exist_ok=True)
    csv_path = ab_dir / f"{study}.csv"
    with open(csv_path, "w") as fh:
        cols = list(rows[0].keys())
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        xs = range(len(rows))
        ax.plot(xs, [r["image_auroc"] for r in rows], "o-", label="image AUROC")
        ax.plot(xs, [r["pixel_auroc"] for r in rows], "s-", label="pixel AUROC")
        ax.set_xticks(list(xs), [r["point"] for r in rows], rotation=45)
        ax.set_xlabel(study)
        ax.set_ylabel("AUROC")
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(ab_dir / f"{study}.png", dpi=110)
        plt.close(fig)
    except Exception as exc:  # plotting must never sink a sweep
        (ab_dir / f"{study}.plot_error.txt").write_text(str(exc))


def append_train_log_summary(out_root: Path) -> dict:
    """Small convenience: last loss per phase from the training log."""
    log_path = out_root / "logs" / "train.jsonl"
    summary: dict = {}
    if not log_path.exists():
        return summary
    with open(log_path) as fh:
        for line in fh:
            rec = json.loads(line)
            key = rec.get("phase")
            summary[key] = rec.get("loss", rec.get("reconstruction"))
    return summary
