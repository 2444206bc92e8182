"""Wall-clock forward throughput of the local velocity model at several sequence lengths.

Usage:
  python -m flatlat.lab.bench --seq-lens 8 64 --batch-sizes 1 8 32
"""

from __future__ import annotations

import argparse
import logging
import time
from dataclasses import replace
from typing import Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from flatlat.errors import ContractError, NumericError
from flatlat.flow import FlowConfig, VelocityModel
from flatlat.nd.rng import RngStream
from flatlat.nd.tensor import no_grad

logger = logging.getLogger(__name__)


def _passes_per_second(model: VelocityModel, batch: int, min_duration: float, warmup: int, seed: int) -> float:
    rng = RngStream(seed)
    z = rng.normal((batch, model.tokens, model.latent_dim))
    t = rng.uniform(batch)
    labels = rng.integers(0, model.num_classes, size=batch)
    with no_grad():
        for _ in range(warmup):
            model(z, t, labels)
        passes = 0
        start = time.perf_counter()
        while True:
            model(z, t, labels)
            passes += 1
            elapsed = time.perf_counter() - start
            if elapsed >= min_duration:
                break
    if elapsed <= 0:
        raise NumericError("benchmark measured zero elapsed time")
    return passes / elapsed


def _cell(seq_len: int, batch: int, config: FlowConfig, latent_dim: int, num_classes: int,
          trials: int, min_duration: float, warmup: int, seed: int) -> dict:
    model = VelocityModel(seq_len, latent_dim, num_classes, config, RngStream(seed).child(f"bench-{seq_len}"))
    runs = [_passes_per_second(model, batch, min_duration, warmup, seed + i) for i in range(trials)]
    return {"seq_len": seq_len, "batch": batch, "passes_per_sec": float(np.median(runs)), "trials": trials}


def throughput_bench(
    seq_lens: Sequence[int] = (8, 64),
    batch_sizes: Sequence[int] = (1, 8, 32),
    config: FlowConfig = FlowConfig(),
    latent_dim: int = 8,
    num_classes: int = 4,
    trials: int = 5,
    min_duration: float = 0.2,
    warmup: int = 2,
    seed: int = 0,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Median forward passes per second per (sequence length, batch) cell.

    Warmup passes are not timed. Cells run one at a time unless `n_jobs` asks
    for parallel workers, which then compete for the same cores.
    """
    if min_duration <= 0:
        raise ContractError(f"benchmark duration must be positive, got {min_duration}")
    if trials < 1 or not seq_lens or not batch_sizes:
        raise ContractError("benchmark needs at least one trial, sequence length and batch size")
    cells = [(s, b) for s in seq_lens for b in batch_sizes]
    logger.info(f"Benchmarking {len(cells)} cells x {trials} trials (n_jobs={n_jobs})")
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_cell)(s, b, config, latent_dim, num_classes, trials, min_duration, warmup, seed) for s, b in cells
    )
    return pd.DataFrame(rows)


def throughput_ratio(table: pd.DataFrame) -> pd.DataFrame:
    """Per batch size: throughput of the shortest sequence over the longest."""
    short, long = table["seq_len"].min(), table["seq_len"].max()
    wide = table.pivot(index="batch", columns="seq_len", values="passes_per_sec")
    out = pd.DataFrame({"batch": wide.index, "ratio": (wide[short] / wide[long]).to_numpy()})
    out.attrs.update(short=int(short), long=int(long))
    return out


def main():
    parser = argparse.ArgumentParser(description="Velocity-model throughput benchmark")
    parser.add_argument("--seq-lens", type=int, nargs="+", default=[8, 64])
    parser.add_argument("--batch-sizes", type=int, nargs="+", default=[1, 8, 32])
    parser.add_argument("--trials", type=int, default=5)
    parser.add_argument("--duration", type=float, default=0.2, help="Seconds per trial")
    parser.add_argument("--model-dim", type=int, default=64)
    parser.add_argument("--depth", type=int, default=6)
    parser.add_argument("--n-jobs", type=int, default=1)
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    config = replace(FlowConfig(), model_dim=args.model_dim, depth=args.depth)
    table = throughput_bench(args.seq_lens, args.batch_sizes, config, trials=args.trials,
                             min_duration=args.duration, n_jobs=args.n_jobs)
    print(table.to_string(index=False))
    print(throughput_ratio(table).to_string(index=False))


if __name__ == "__main__":
    main()
