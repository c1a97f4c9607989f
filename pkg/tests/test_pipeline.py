"""End-to-end orchestration: staged training, artifacts, determinism,
resumption, and CLI exit codes on a micro experiment."""

import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from nowcastlab import pipeline as pl
from nowcastlab import report
from nowcastlab import synthetic_radar as sr
from nowcastlab.checkpoint import load_checkpoint, save_checkpoint
from nowcastlab.config import parse_config_text

MICRO_INI = """\
[experiment]
name = micro
master_seed = 5
ensemble_size = 2

[generator]
height = 32
width = 32
t_in = 3
t_out = 2
n_blobs = 2
blob_scale_min = 3
blob_scale_max = 6

[dataset]
n_train = 4
n_val = 2
n_test = 2

[forecaster]
base_width = 8
n_downsamples = 1
translator_width = 16
translator_depth = 1
norm_groups = 4

[autoencoder]
latent_channels = 2
base_width = 8
n_downsamples = 2
norm_groups = 4

[denoiser]
n_blocks = 2
embed_dim = 16
patch_size = 2
n_heads = 2

[schedule]
n_steps = 50

[sampler]
n_sample_steps = 4
guidance = 1.5

[train.det]
steps = 8
batch_size = 2
lr = 1e-3
checkpoint_every = 4

[train.ae]
steps = 8
batch_size = 2
lr = 1e-3
checkpoint_every = 4

[train.diff]
steps = 8
batch_size = 2
lr = 1e-3
checkpoint_every = 4
p_drop = 0.1

[metrics]
thresholds = 16, 74
pools = 1, 2
"""


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    """One fully trained, sampled, and evaluated micro experiment."""
    out = tmp_path_factory.mktemp("micro")
    config = parse_config_text(MICRO_INI)
    pl.run_gen_data(config, out)
    pl.run_train("det", config, out)
    pl.run_train("ae", config, out)
    pl.run_train("diff", config, out)
    pl.run_sample(config, out)
    pl.run_evaluate(config, out)
    return config, out


class TestSeedDerivation:
    def test_stable_hash_is_stable_and_bounded(self):
        a = pl.stable_hash(1, "det", "init")
        assert a == pl.stable_hash(1, "det", "init")
        assert 0 <= a < 2**63
        assert a != pl.stable_hash(1, "det", "train")
        assert a != pl.stable_hash(2, "det", "init")

    def test_member_seeds_distinct(self):
        seeds = {pl.member_seed(7, ev, m) for ev in (10, 11) for m in range(5)}
        assert len(seeds) == 10


class TestArtifacts:
    def test_manifest_and_split(self, micro):
        config, out = micro
        split, stored = sr.load_manifest(pl.manifest_path(out))
        assert stored == pl.data_hash(config)
        assert (len(split.train), len(split.val), len(split.test)) == (4, 2, 2)
        all_seeds = list(split.train) + list(split.val) + list(split.test)
        assert len(set(all_seeds)) == len(all_seeds)

    def test_checkpoints_at_boundaries(self, micro):
        _, out = micro
        for stage in ("det", "ae", "diff"):
            for step in (4, 8):
                assert pl.checkpoint_path(out, stage, step).exists()
            found = pl.find_latest_checkpoint(out, stage)
            assert found is not None and found[1] == 8

    def test_loss_csv_rows_and_provenance(self, micro):
        config, out = micro
        for stage in ("det", "ae", "diff"):
            comments, rows = report.read_csv(out / f"loss_{stage}.csv")
            assert any(c.startswith("config_hash = ") for c in comments)
            assert any(c == f"seed = {config.master_seed}" for c in comments)
            assert [int(r["step"]) for r in rows] == list(range(1, 9))
            assert all(np.isfinite(float(r["loss"])) for r in rows)
            assert all(float(r["lr"]) > 0 for r in rows)

    def test_forecast_rasters_written(self, micro):
        config, out = micro
        split, _ = sr.load_manifest(pl.manifest_path(out))
        for seed in split.test:
            det = sr.load_raw_sequence(out / f"det_{seed}.raw")
            assert det.shape == (2, 1, 32, 32) and det.dtype == np.float32
            assert det.min() >= 0.0 and det.max() <= 255.0
            for m in range(config.ensemble_size):
                member = sr.load_raw_sequence(out / f"cascade_{seed}_m{m}.raw")
                assert member.shape == (2, 1, 32, 32)

    def test_metrics_csv_layout(self, micro):
        config, out = micro
        comments, rows = report.read_csv(out / "metrics.csv")
        assert any(c.startswith("config_hash = ") for c in comments)
        assert {r["model"] for r in rows} == {"det", "cascade"}
        # 2 models x 2 thresholds x 2 pools
        assert len(rows) == 8
        for r in rows:
            assert 0.0 <= float(r["csi"]) <= 1.0
            assert -1.0 <= float(r["hss"]) <= 1.0
            assert float(r["crps"]) >= 0.0
            assert float(r["ssim"]) <= 1.0
        # thresholds-major within each model block
        det_rows = [r for r in rows if r["model"] == "det"]
        assert [(float(r["threshold"]), int(r["pool"])) for r in det_rows] == \
            [(16.0, 1), (16.0, 2), (74.0, 1), (74.0, 2)]

    def test_frame_grids_rendered(self, micro):
        _, out = micro
        split, _ = sr.load_manifest(pl.manifest_path(out))
        for seed in split.test:
            png = out / f"frames_{seed}.png"
            assert png.stat().st_size > 0
            assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


class TestSampler:
    def test_member_is_seed_deterministic(self, micro):
        config, out = micro
        sampler = pl.CascadeSampler.from_artifacts(config, out)
        data = pl.EventData(config)
        split, _ = sr.load_manifest(pl.manifest_path(out))
        ctx, _ = data.context_target(split.test[0])
        a = sampler.sample_member(ctx, seed=99)
        b = sampler.sample_member(ctx, seed=99)
        c = sampler.sample_member(ctx, seed=100)
        torch.testing.assert_close(a, b, rtol=0, atol=0)
        assert not torch.allclose(a, c)
        assert a.shape == (2, 1, 32, 32)
        assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0

    def test_ensemble_shape_and_member_seeding(self, micro):
        config, out = micro
        sampler = pl.CascadeSampler.from_artifacts(config, out)
        data = pl.EventData(config)
        split, _ = sr.load_manifest(pl.manifest_path(out))
        ctx, _ = data.context_target(split.test[0])
        members = sampler.sample_ensemble(ctx, split.test[0], 2)
        assert members.shape == (2, 2, 1, 32, 32) and members.dtype == np.float32
        lone = sampler.sample_member(
            ctx, pl.member_seed(config.master_seed, split.test[0], 1))
        np.testing.assert_array_equal(members[1], sr.denormalize(lone.numpy()))

    def test_prob_only_uses_context_without_forecast(self, micro):
        config, out = micro
        sampler = pl.CascadeSampler.from_artifacts(config, out)
        data = pl.EventData(config)
        split, _ = sr.load_manifest(pl.manifest_path(out))
        ctx, _ = data.context_target(split.test[0])
        with_blur = sampler.sample_member(ctx, seed=5, use_blur=True)
        without = sampler.sample_member(ctx, seed=5, use_blur=False)
        assert not torch.allclose(with_blur, without)


class TestDeterminismAndResume:
    def test_cross_run_identical_and_resume_oracle(self, micro, tmp_path):
        config, out = micro
        twin = tmp_path / "twin"
        twin.mkdir()
        pl.run_gen_data(config, twin)
        assert pl.manifest_path(twin).read_bytes() == \
            pl.manifest_path(out).read_bytes()
        for stage in ("det", "ae"):
            pl.run_train(stage, config, twin)
            assert (twin / f"loss_{stage}.csv").read_bytes() == \
                (out / f"loss_{stage}.csv").read_bytes()
            assert pl.checkpoint_path(twin, stage, 8).read_bytes() == \
                pl.checkpoint_path(out, stage, 8).read_bytes()
        # interrupt the diffusion stage at step 4, then resume to the end
        interrupted = pl.run_train("diff", config, twin, stop_after=4)
        assert interrupted == pl.checkpoint_path(twin, "diff", 4)
        resumed = pl.run_train("diff", config, twin, resume=True)
        assert resumed == pl.checkpoint_path(twin, "diff", 8)
        assert pl.checkpoint_path(twin, "diff", 8).read_bytes() == \
            pl.checkpoint_path(out, "diff", 8).read_bytes()
        assert (twin / "loss_diff.csv").read_bytes() == \
            (out / "loss_diff.csv").read_bytes()

    def test_reevaluation_is_byte_identical(self, micro):
        config, out = micro
        before = (out / "metrics.csv").read_bytes()
        pl.run_evaluate(config, out)
        assert (out / "metrics.csv").read_bytes() == before

    def test_diff_retrain_leaves_other_stages_untouched(self, micro):
        config, out = micro
        det_bytes = pl.checkpoint_path(out, "det", 8).read_bytes()
        ae_bytes = pl.checkpoint_path(out, "ae", 8).read_bytes()
        diff_bytes = pl.checkpoint_path(out, "diff", 8).read_bytes()
        pl.run_train("diff", config, out, resume=False)
        assert pl.checkpoint_path(out, "det", 8).read_bytes() == det_bytes
        assert pl.checkpoint_path(out, "ae", 8).read_bytes() == ae_bytes
        assert pl.checkpoint_path(out, "diff", 8).read_bytes() == diff_bytes


class TestPrerequisites:
    def test_training_requires_manifest(self, tmp_path):
        config = parse_config_text(MICRO_INI)
        with pytest.raises(pl.PrerequisiteError, match="manifest"):
            pl.run_train("det", config, tmp_path)

    def test_diffusion_requires_earlier_stages(self, tmp_path):
        config = parse_config_text(MICRO_INI)
        pl.run_gen_data(config, tmp_path)
        with pytest.raises(pl.PrerequisiteError, match="det"):
            pl.run_train("diff", config, tmp_path)
        pl.run_train("det", config, tmp_path)
        with pytest.raises(pl.PrerequisiteError, match="ae"):
            pl.run_train("diff", config, tmp_path)

    def test_sampling_requires_checkpoints(self, tmp_path):
        config = parse_config_text(MICRO_INI)
        pl.run_gen_data(config, tmp_path)
        with pytest.raises(pl.PrerequisiteError):
            pl.run_sample(config, tmp_path)

    def test_evaluate_requires_rasters(self, tmp_path):
        config = parse_config_text(MICRO_INI)
        pl.run_gen_data(config, tmp_path)
        with pytest.raises(pl.PrerequisiteError, match="raster"):
            pl.run_evaluate(config, tmp_path)

    def test_stale_manifest_rejected(self, tmp_path):
        config = parse_config_text(MICRO_INI)
        pl.run_gen_data(config, tmp_path)
        other = parse_config_text(MICRO_INI.replace("n_blobs = 2", "n_blobs = 3"))
        with pytest.raises(pl.PrerequisiteError, match="gen-data"):
            pl.run_train("det", other, tmp_path)

    def test_unknown_stage_and_ablation_rejected(self, tmp_path):
        config = parse_config_text(MICRO_INI)
        with pytest.raises(ValueError, match="stage"):
            pl.run_train("vae", config, tmp_path)
        with pytest.raises(ValueError, match="ablation"):
            pl.run_ablation("dropout", config, tmp_path)


class TestScoreModel:
    def test_member_averaging_of_categorical_scores(self):
        rng = np.random.default_rng(0)
        target = (rng.random((1, 1, 8, 8)) > 0.5).astype(np.float64) * 255.0
        perfect = target.copy()
        empty = np.zeros_like(target)
        members = {1: np.stack([perfect, empty])}
        rows = pl.score_model(members, {1: target}, thresholds=(100.0,), pools=(1,))
        assert len(rows) == 1
        tau, pool, csi, hss, crps, ssim = rows[0]
        assert (tau, pool) == (100.0, 1)
        # perfect member scores 1, empty member 0; the mean is 0.5
        assert csi == pytest.approx(0.5)
        assert np.isfinite(crps) and crps > 0
        assert ssim <= 1.0

    def test_empty_events_rejected(self):
        with pytest.raises(ValueError):
            pl.score_model({}, {}, thresholds=(1.0,), pools=(1,))


class TestAblations:
    def test_cascade_ablation_rows(self, micro):
        config, out = micro
        csv_path = pl.run_ablation("cascade", config, out)
        _, rows = report.read_csv(csv_path)
        assert {r["model"] for r in rows} == {"det", "prob_only", "cascade"}
        assert len(rows) == 3 * 2 * 2
        assert all(np.isfinite(float(r["csi"])) for r in rows)

    def test_latent_dim_ablation_outputs(self, micro):
        config, out = micro
        csv_path = pl.run_ablation("latent_dim", config, out)
        _, rows = report.read_csv(csv_path)
        assert {int(r["latent_dim"]) for r in rows} == {2, 4, 8}
        assert len(rows) == 3 * 2
        assert (out / "ablation_latent_dim.png").stat().st_size > 0

    def test_frame_split_ablation_outputs(self, micro):
        config, out = micro
        csv_path = pl._ablation_frame_split(config, out, splits=(1, 2))
        _, rows = report.read_csv(csv_path)
        assert {int(r["split"]) for r in rows} == {1, 2}
        assert len(rows) == 2 * config.train_diff.steps
        assert all(np.isfinite(float(r["train_loss"])) for r in rows)
        assert (out / "ablation_frame_split.png").stat().st_size > 0


def run_cli(args: list[str]) -> subprocess.CompletedProcess:
    return subprocess.run([sys.executable, "-m", "nowcastlab.cli", *args],
                          capture_output=True, text=True, timeout=300)


@pytest.fixture(scope="module")
def ini_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("cli") / "micro.ini"
    path.write_text(MICRO_INI)
    return path


class TestCLI:
    def test_gen_data_exits_zero(self, ini_path, tmp_path):
        proc = run_cli(["gen-data", "--config", str(ini_path), "--out", str(tmp_path)])
        assert proc.returncode == 0, proc.stderr
        assert "manifest" in proc.stdout
        assert (tmp_path / "manifest.txt").exists()

    def test_seed_override_changes_manifest(self, ini_path, tmp_path):
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert run_cli(["gen-data", "--config", str(ini_path),
                        "--out", str(a)]).returncode == 0
        assert run_cli(["gen-data", "--config", str(ini_path), "--seed", "5",
                        "--out", str(b)]).returncode == 0
        assert run_cli(["gen-data", "--config", str(ini_path), "--seed", "6",
                        "--out", str(c)]).returncode == 0
        # --seed 5 matches the file value; --seed 6 changes the dataset
        assert (a / "manifest.txt").read_bytes() == (b / "manifest.txt").read_bytes()
        assert (a / "manifest.txt").read_bytes() != (c / "manifest.txt").read_bytes()

    def test_bad_config_exits_two(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text(MICRO_INI + "\n[generator]\nwarp_speed = 9\n")
        proc = run_cli(["gen-data", "--config", str(bad), "--out", str(tmp_path)])
        assert proc.returncode == 2
        assert "config error" in proc.stderr

    def test_missing_config_exits_two(self, tmp_path):
        proc = run_cli(["gen-data", "--config", str(tmp_path / "absent.ini"),
                        "--out", str(tmp_path)])
        assert proc.returncode == 2

    def test_missing_prerequisite_exits_three(self, ini_path, tmp_path):
        assert run_cli(["gen-data", "--config", str(ini_path),
                        "--out", str(tmp_path)]).returncode == 0
        proc = run_cli(["train-diff", "--config", str(ini_path), "--out", str(tmp_path)])
        assert proc.returncode == 3
        assert "prerequisite error" in proc.stderr

    def test_numerical_failure_exits_four(self, micro, ini_path, tmp_path):
        _, out = micro
        broken = tmp_path / "broken"
        shutil.copytree(out, broken)
        # poison the newest diffusion checkpoint: every weight becomes NaN
        found = pl.find_latest_checkpoint(broken, "diff")
        ckpt = load_checkpoint(found[0])
        tensors = dict(ckpt.tensors)
        for name, arr in tensors.items():
            if name.startswith("model.") and np.issubdtype(arr.dtype, np.floating):
                tensors[name] = np.full_like(arr, np.nan)
        meta = dict(ckpt.meta)
        meta["step"] = found[1] + 1
        save_checkpoint(pl.checkpoint_path(broken, "diff", found[1] + 1),
                        kind="diff", tensors=tensors, meta=meta)
        proc = run_cli(["sample", "--config", str(ini_path), "--out", str(broken)])
        assert proc.returncode == 4
        assert "numerical failure" in proc.stderr
