"""Command-line entry points.

Commands: generate-data, train-autoencoder, train, reconstruct, evaluate,
ablate, report. Exit codes: 0 success, 1 usage error, 2 runtime failure.
The output root comes from --out or the LATENTAD_OUT environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import config as cfg_mod
from .data import generate_synthetic, load_image, scan_mvtec_layout
from .metrics import read_report_csv
from .pipeline import (
    dataset_root,
    ensure_dataset,
    load_trained,
    run_ablation,
    run_evaluation,
    run_training,
)
from .scoring import image_seed, save_result, score_image


class CliParser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def propagate_seed(cfg: dict, seed: int) -> dict:
    """Push one seed into every seeded section for whole-run determinism."""
    out = cfg_mod.deep_merge(cfg, {"seed": seed})
    if out.get("dataset", {}).get("synthetic"):
        out = cfg_mod.deep_merge(out, {"dataset": {"synthetic": {"seed": seed}}})
    for phase in ("autoencoder", "pretrain_sd", "train_sg"):
        if phase in out.get("training", {}):
            out = cfg_mod.deep_merge(out, {"training": {phase: {"seed": seed}}})
    out = cfg_mod.deep_merge(out, {"scoring": {"seed": seed}})
    return out


def add_common_arguments(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", default="desk", choices=list(cfg_mod.PRESETS))
    p.add_argument("--config", default=None, help="YAML config file overriding the preset")
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-path config override, e.g. scoring.ddim_steps=50",
    )
    p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    p.add_argument("--out", default=None, help="output root (default $LATENTAD_OUT or ./runs)")


def resolve(args) -> tuple[dict, Path]:
    cfg = cfg_mod.resolve_config(args.preset, args.config, args.overrides)
    if args.seed is not None:
        cfg = propagate_seed(cfg, args.seed)
    out_root = Path(args.out or os.environ.get("LATENTAD_OUT", "runs"))
    out_root.mkdir(parents=True, exist_ok=True)
    chash = cfg_mod.config_hash(cfg)
    cfg_mod.save_resolved_config(cfg, out_root)
    (out_root / "config_hash.txt").write_text(chash + "\n")
    return cfg, out_root


def cmd_generate_data(args) -> int:
    cfg, _ = resolve(args)
    if not args.output:
        print("generate-data: an --output path is required", file=sys.stderr)
        return 1
    spec = cfg_mod.synthetic_spec(cfg)
    manifest = generate_synthetic(spec, args.output)
    manifest.to_csv(Path(args.output) / "manifest.csv", relative_to=args.output)
    print(f"wrote {len(manifest.entries)} images across {len(manifest.categories)} categories to {args.output}")
    return 0


def cmd_train_autoencoder(args) -> int:
    cfg, out_root = resolve(args)
    run_training(cfg, out_root, phases=["train_autoencoder"], resume=args.resume)
    print(f"autoencoder checkpoint at {out_root / 'checkpoints' / 'autoencoder.pt'}")
    return 0


def cmd_train(args) -> int:
    cfg, out_root = resolve(args)
    phases = args.phases.split(",") if args.phases else None
    paths = run_training(cfg, out_root, phases=phases, resume=args.resume)
    for phase, path in paths.items():
        marker = "present" if path.exists() else "missing"
        print(f"{phase}: {path} ({marker})")
    return 0


def cmd_reconstruct(args) -> int:
    cfg, out_root = resolve(args)
    autoencoder, assembly = load_trained(out_root)
    scoring_cfg = cfg_mod.scoring_config(cfg)
    schedule = cfg_mod.schedule_from_config(cfg)
    from .backbone import get_backbone

    backbone = get_backbone(scoring_cfg.backbone, seed=scoring_cfg.seed)
    size = int(cfg["dataset"]["image_size"])
    out_dir = out_root / "reconstructions"
    chash = cfg_mod.config_hash(cfg)
    if args.image:
        paths = [Path(args.image)]
    else:
        manifest = ensure_dataset(cfg, out_root)
        paths = [Path(e.path) for e in manifest.select(split="test")][: args.limit]
    for p in paths:
        x0 = load_image(p, (size, size))
        result = score_image(
            x0, assembly, autoencoder, schedule, backbone, scoring_cfg,
            seed=image_seed(scoring_cfg.seed, p.name),
        )
        save_result(out_dir, p.stem, result, chash)
        print(f"{p}: image_score={result.image_score:.6f}")
    print(f"results in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg, out_root = resolve(args)
    report, _ = run_evaluation(cfg, out_root, heatmaps=args.heatmaps)
    print(report.to_markdown())
    print(f"\nreport files in {out_root / 'eval'}")
    return 0


def cmd_ablate(args) -> int:
    cfg, out_root = resolve(args)
    points = None
    if args.points:
        if args.study == "pooling":
            points = [tuple(int(x) for x in p.split("-")) for p in args.points.split(",")]
        elif args.study == "feature_layers":
            points = [tuple(int(x) for x in p.split("+")) for p in args.points.split(",")]
        elif args.study in ("ddim_steps", "forward_t"):
            points = [int(p) for p in args.points.split(",")]
        else:
            points = args.points.split(",")
    rows = run_ablation(cfg, out_root, args.study, points=points)
    cols = list(rows[0].keys())
    print(",".join(cols))
    for r in rows:
        print(",".join(f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols))
    print(f"\nsweep outputs in {out_root / 'ablations'}")
    return 0


def cmd_report(args) -> int:
    reports = [read_report_csv(p) for p in args.inputs]
    hashes = {r.metadata.get("config_hash", "") for r in reports}
    if len(hashes) > 1:
        raise RuntimeError(
            f"refusing to combine reports from mismatched configs: {sorted(hashes)}"
        )
    for path, rep in zip(args.inputs, reports):
        print(f"## {path}")
        print(rep.to_markdown())
        print()
    return 0


def build_parser() -> CliParser:
    parser = CliParser(prog="latentad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write the synthetic defect corpus")
    add_common_arguments(p)
    p.add_argument("--output", default=None, help="corpus output directory")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train-autoencoder", help="train only the pixel autoencoder")
    add_common_arguments(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train_autoencoder)

    p = sub.add_parser("train", help="run the full three-phase training")
    add_common_arguments(p)
    p.add_argument("--phases", default=None, help="comma-separated subset of phases")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct images through the trained pipeline")
    add_common_arguments(p)
    p.add_argument("--image", default=None, help="single image path (default: test split)")
    p.add_argument("--limit", type=int, default=8)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score the test split and emit metric reports")
    add_common_arguments(p)
    p.add_argument("--heatmaps", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a hyperparameter sweep study")
    add_common_arguments(p)
    p.add_argument(
        "--study", required=True,
        choices=["ddim_steps", "forward_t", "feature_layers", "pooling",
                 "connection_variant", "norm_activation"],
    )
    p.add_argument("--points", default=None, help="sweep points, study-specific syntax")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="render and compare saved metric reports")
    p.add_argument("inputs", nargs="+")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (KeyboardInterrupt, BrokenPipeError):
        return 2
    except Exception as exc:
        print(f"latentad: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
