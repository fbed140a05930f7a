"""Command-line workflows on a miniature end-to-end configuration."""

import contextlib
import hashlib
import io
import json
from pathlib import Path

import pytest

from latentad.cli import main

# a deliberately tiny setup so full train+evaluate runs in seconds
MICRO_OVERRIDES = [
    "dataset.image_size=32",
    "dataset.synthetic.image_size=32",
    "dataset.synthetic.train_good=6",
    "dataset.synthetic.test_good=2",
    "dataset.synthetic.test_per_defect=1",
    "model.autoencoder.base_channels=8",
    "model.denoiser.base_channels=8",
    "model.denoiser.latent_size=4",
    "model.denoiser.image_size=32",
    "model.denoiser.num_heads=2",
    "model.denoiser.time_embed_dim=32",
    "model.schedule.T=50",
    "training.autoencoder.epochs=3",
    "training.autoencoder.batch_size=6",
    "training.pretrain_sd.epochs=2",
    "training.pretrain_sd.batch_size=6",
    "training.train_sg.epochs=2",
    "training.train_sg.batch_size=6",
    "scoring.ddim_steps=2",
    "scoring.sigma=1.0",
    "scoring.pool_iterations=2",
    "scoring.pool_kernel=4",
    "scoring.feature_levels=[1,2]",
]


def run_cli(*args):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main(list(args))
        except SystemExit as exc:  # argparse usage errors
            code = exc.code
    return code, out.getvalue(), err.getvalue()


def with_overrides(*args):
    flat = []
    for o in MICRO_OVERRIDES:
        flat += ["--set", o]
    return list(args) + flat


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code, stdout, err = run_cli(*with_overrides("train", "--out", str(out), "--seed", "3"))
    assert code == 0, err
    return out


class TestGenerateData:
    def test_seed_determinism(self, tmp_path):
        for name in ("a", "b"):
            code, _, err = run_cli(*with_overrides(
                "generate-data", "--out", str(tmp_path / "rt"), "--seed", "7",
                "--output", str(tmp_path / name),
            ))
            assert code == 0, err
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_missing_output_path(self, tmp_path):
        code, _, err = run_cli(*with_overrides("generate-data", "--out", str(tmp_path / "rt")))
        assert code == 1
        assert "output" in err

    def test_manifest_row_count_matches_spec_arithmetic(self, tmp_path):
        code, _, _ = run_cli(*with_overrides(
            "generate-data", "--out", str(tmp_path / "rt"), "--output", str(tmp_path / "c"),
        ))
        assert code == 0
        rows = (tmp_path / "c" / "manifest.csv").read_text().strip().splitlines()[1:]
        # 3 categories x (6 train + 2 good + 3 defects x 1)
        assert len(rows) == 3 * (6 + 2 + 3)


class TestTrain:
    def test_checkpoints_written(self, trained_run):
        ckpts = trained_run / "checkpoints"
        for name in ("autoencoder.pt", "sd_unet.pt", "assembly.pt"):
            assert (ckpts / name).exists()

    def test_phase_skip_without_prerequisite(self, tmp_path):
        code, _, err = run_cli(*with_overrides(
            "train", "--out", str(tmp_path / "solo"), "--phases", "train_sg",
        ))
        assert code == 2
        assert "requires" in err

    def test_resume_reproduces_loss_curve(self, tmp_path):
        full = tmp_path / "full"
        code, _, err = run_cli(*with_overrides("train", "--out", str(full), "--seed", "5"))
        assert code == 0, err

        split = tmp_path / "split"
        short = ["--set", "training.train_sg.epochs=1"]
        code, _, err = run_cli(*with_overrides("train", "--out", str(split), "--seed", "5"), *short)
        assert code == 0, err
        code, _, err = run_cli(
            *with_overrides("train", "--out", str(split), "--seed", "5", "--resume"),
            "--set", "training.train_sg.epochs=2",
        )
        assert code == 0, err

        def sg_losses(root):
            out = {}
            for line in (root / "logs" / "train.jsonl").read_text().splitlines():
                rec = json.loads(line)
                if rec.get("phase") == "train_sg":
                    out[(rec["epoch"], rec["step"])] = rec["loss"]
            return out

        full_losses = sg_losses(full)
        split_losses = sg_losses(split)
        assert set(full_losses) == set(split_losses)
        for key, v in full_losses.items():
            assert abs(v - split_losses[key]) < 1e-6


class TestEvaluate:
    def test_report_files_and_hash(self, trained_run):
        code, stdout, err = run_cli(*with_overrides("evaluate", "--out", str(trained_run), "--seed", "3"))
        assert code == 0, err
        report = (trained_run / "eval" / "report.csv").read_text()
        chash = (trained_run / "config_hash.txt").read_text().strip()
        assert f"# config_hash: {chash}" in report
        assert (trained_run / "eval" / "report.md").exists()
        assert "| mean |" in stdout or "| all |" in stdout

    def test_evaluation_is_reproducible(self, trained_run):
        run_cli(*with_overrides("evaluate", "--out", str(trained_run), "--seed", "3"))
        first = (trained_run / "eval" / "report.csv").read_text()
        run_cli(*with_overrides("evaluate", "--out", str(trained_run), "--seed", "3"))
        assert (trained_run / "eval" / "report.csv").read_text() == first

    def test_untrained_run_fails_cleanly(self, tmp_path):
        code, _, err = run_cli(*with_overrides("evaluate", "--out", str(tmp_path / "none")))
        assert code == 2


class TestReconstruct:
    def test_outputs_written(self, trained_run):
        code, stdout, err = run_cli(*with_overrides(
            "reconstruct", "--out", str(trained_run), "--seed", "3", "--limit", "2",
        ))
        assert code == 0, err
        rec_dir = trained_run / "reconstructions"
        assert (rec_dir / "scores.csv").exists()
        assert list(rec_dir.glob("*_reconstruction.png"))
        assert list(rec_dir.glob("*_map.fgrd"))
        assert list(rec_dir.glob("*_heatmap.png"))


class TestAblate:
    def test_pooling_sweep_grid(self, trained_run):
        code, stdout, err = run_cli(*with_overrides(
            "ablate", "--out", str(trained_run), "--seed", "3",
            "--study", "pooling", "--points", "1-8,2-4,4-4",
        ))
        assert code == 0, err
        csv_path = trained_run / "ablations" / "pooling.csv"
        lines = csv_path.read_text().strip().splitlines()
        assert len(lines) == 4
        assert (trained_run / "ablations" / "pooling.png").exists()

    def test_ddim_sweep_walltime_monotone(self, trained_run):
        code, stdout, err = run_cli(*with_overrides(
            "ablate", "--out", str(trained_run), "--seed", "3",
            "--study", "ddim_steps", "--points", "1,4,8,16",
        ))
        assert code == 0, err
        lines = (trained_run / "ablations" / "ddim_steps.csv").read_text().strip().splitlines()
        assert len(lines) == 5
        times = [float(l.split(",")[-1]) for l in lines[1:]]
        assert all(a <= b * 1.15 for a, b in zip(times, times[1:]))  # small jitter margin


class TestReport:
    def test_mismatched_hashes_refused(self, trained_run, tmp_path):
        src = (trained_run / "eval" / "report.csv").read_text()
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        a.write_text(src)
        b.write_text(src.replace("# config_hash: ", "# config_hash: other"))
        code, _, err = run_cli("report", str(a), str(b))
        assert code == 2
        assert "mismatched" in err

    def test_matching_reports_render(self, trained_run, tmp_path):
        src = (trained_run / "eval" / "report.csv").read_text()
        a = tmp_path / "a.csv"
        a.write_text(src)
        code, stdout, _ = run_cli("report", str(a))
        assert code == 0
        assert "image AUROC/AP/F1max" in stdout


class TestUsageErrors:
    def test_unknown_command(self):
        code, _, _ = run_cli("frobnicate")
        assert code == 1

    def test_unknown_study(self, tmp_path):
        code, _, _ = run_cli("ablate", "--out", str(tmp_path), "--study", "nonsense")
        assert code == 1
