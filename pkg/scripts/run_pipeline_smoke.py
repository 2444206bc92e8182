#!/usr/bin/env python3
"""Run every flatlat stage at toy scale and print full stdout/stderr.

This is a smoke runner (not a pytest test) so you can see real output easily.
Artifacts land in data/smoke unless FLATLAT_DATA_DIR says otherwise.
"""

from __future__ import annotations

import os
import subprocess
import sys

TINY = [
    "--set", "data.train_count=64", "--set", "data.val_count=16",
    "--set", "vae.tokens=4", "--set", "vae.latent_dim=4", "--set", "vae.width=16", "--set", "vae.heads=2",
    "--set", "vae.encoder_depth=1", "--set", "vae.decoder_depth=1", "--set", "vae.batch_size=16",
    "--set", "vae.warmup_epochs=1", "--set", "vae.stable_epochs=2", "--set", "vae.decay_epochs=1",
    "--set", "vae.peak_lr=1e-3",
    "--set", "flow.model_dim=16", "--set", "flow.depth=1", "--set", "flow.heads=2",
    "--set", "flow.train_steps=20", "--set", "flow.log_every=10", "--set", "flow.euler_steps=10",
    "--set", "sample.count=8", "--set", "analysis.samples=16", "--set", "analysis.knn_k=5",
    "--set", "bench.trials=1", "--set", "bench.duration=0.05", "--set", "bench.batch_sizes=1,8",
]

STAGES = ["flops", "gen-data", "train-vae", "train-flow", "sample", "ablate", "analyze", "bench"]


def _run(cmd: list[str]) -> int:
    print("\n$", " ".join(cmd))
    p = subprocess.run(cmd, text=True, capture_output=True)
    if p.stdout:
        print(p.stdout.rstrip())
    if p.stderr:
        print(p.stderr.rstrip(), file=sys.stderr)
    return int(p.returncode)


def main() -> int:
    py = sys.executable
    data_dir = os.getenv("FLATLAT_DATA_DIR", "data/smoke")
    for stage in STAGES:
        rc = _run([py, "-m", "flatlat", stage, *TINY, "--data-dir", data_dir])
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
