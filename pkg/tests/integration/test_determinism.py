"""Two runs of the smoke pipeline with the same seed must write identical reports."""

import pytest

from flatlat import pipeline
from flatlat.registry import load_checkpoint, unprefixed

pytestmark = [pytest.mark.integration, pytest.mark.slow]

SMOKE = [
    "--seed", "5",
    "--set", "data.train_count=32", "--set", "data.val_count=8", "--set", "data.image_size=16",
    "--set", "data.feature_dim=6",
    "--set", "vae.tokens=3", "--set", "vae.latent_dim=2", "--set", "vae.width=8", "--set", "vae.heads=2",
    "--set", "vae.encoder_depth=1", "--set", "vae.decoder_depth=1", "--set", "vae.batch_size=8",
    "--set", "vae.warmup_epochs=1", "--set", "vae.stable_epochs=1", "--set", "vae.decay_epochs=1",
    "--set", "vae.peak_lr=1e-3",
    "--set", "flow.model_dim=8", "--set", "flow.depth=1", "--set", "flow.heads=2", "--set", "flow.batch_size=8",
    "--set", "flow.train_steps=4", "--set", "flow.log_every=2", "--set", "flow.euler_steps=4",
    "--set", "sample.count=8", "--set", "analysis.samples=8", "--set", "analysis.knn_k=3",
]

STAGES = ("gen-data", "train-vae", "train-flow", "sample", "ablate", "analyze")
REPORTS = (
    "gen-data/dataset.csv",
    "train-vae/vae_log.csv",
    "train-flow/flow_log.csv",
    "sample/labels.csv",
    "sample/latents.fgrd",
    "ablate/ablation.csv",
    "analyze/noise.csv",
    "analyze/knn.csv",
    "train-vae/vae_log.svg",
)


def run_smoke(monkeypatch, root):
    # via the environment so the recorded command line matches across roots
    monkeypatch.setenv("FLATLAT_DATA_DIR", str(root))
    for stage in STAGES:
        assert pipeline.main([stage, *SMOKE]) == 0, stage
    return {name: (root / "reports" / name).read_bytes() for name in REPORTS}


class TestDeterminism:
    def test_rerun_reproduces_every_report(self, monkeypatch, tmp_path):
        first = run_smoke(monkeypatch, tmp_path / "a")
        second = run_smoke(monkeypatch, tmp_path / "b")
        for name in REPORTS:
            assert first[name] == second[name], name

    def test_checkpoints_land_in_one_version(self, monkeypatch, tmp_path):
        run_smoke(monkeypatch, tmp_path)
        versions = [p.name for p in (tmp_path / "models" / "vae").iterdir() if p.is_dir()]
        assert len(versions) == 1 and versions[0].startswith("s5-")


class TestVaeResume:
    def test_resume_trains_from_last_weights_and_keeps_best(self, monkeypatch, tmp_path):
        monkeypatch.setenv("FLATLAT_DATA_DIR", str(tmp_path))
        assert pipeline.main(["gen-data", *SMOKE]) == 0
        assert pipeline.main(["train-vae", *SMOKE, "--set", "vae.epochs=2"]) == 0
        tensors, meta = load_checkpoint("vae", root=tmp_path)
        assert set(unprefixed(tensors, "last")) == set(unprefixed(tensors, "model"))
        first_best = meta["best_val_recon"]

        assert pipeline.main(["train-vae", *SMOKE, "--set", "vae.resume=true"]) == 0
        _, meta = load_checkpoint("vae", root=tmp_path)
        assert meta["epochs_completed"] == 3
        assert meta["best_val_recon"] <= first_best
        assert 1 <= meta["best_epoch"] <= 3
