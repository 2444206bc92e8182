"""Hyperparameter sweeps: latent shape at fixed T*d, and guidance weight x interval start."""

from __future__ import annotations

import logging
from dataclasses import replace
from typing import Sequence

import numpy as np
import pandas as pd

from flatlat.analysis import centroid_accuracy, per_class_diversity
from flatlat.data.synth import GridDataset
from flatlat.flow import FlowConfig, LatentStats, VelocityModel, default_labels, sample_latents
from flatlat.nd.optim import WsdSchedule
from flatlat.nd.rng import RngStream
from flatlat.vae import FlatVAE, VaeConfig, decode_latents, train_vae

logger = logging.getLogger(__name__)

LATENT_SHAPES = ((16, 4), (8, 8), (4, 16))
CFG_WEIGHTS = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0)
CFG_STARTS = (0.0, 0.1, 0.2, 0.225, 0.3, 0.4)


def sweep_latent(
    train: GridDataset,
    val: GridDataset,
    base: VaeConfig,
    schedule: WsdSchedule,
    rng: RngStream,
    shapes: Sequence[tuple[int, int]] = LATENT_SHAPES,
    batch_size: int = 64,
    epochs: int | None = None,
) -> pd.DataFrame:
    """One full VAE training per (tokens, latent_dim) shape."""
    rows = []
    for tokens, dim in shapes:
        config = replace(base, tokens=tokens, latent_dim=dim)
        result = train_vae(train, val, config, schedule, rng.child(f"latent-{tokens}x{dim}"),
                           batch_size=batch_size, epochs=epochs)
        rows.append({
            "tokens": tokens,
            "latent_dim": dim,
            "latent_size": tokens * dim,
            "beta": config.beta,
            "compression": config.compression_ratio,
            "val_mse": result.best_val_recon,
            "best_epoch": result.best_epoch,
        })
        logger.info(f"T={tokens} d={dim}: val_mse={result.best_val_recon:.5f}")
    return pd.DataFrame(rows)


def token_ordering_holds(table: pd.DataFrame) -> bool:
    """Within each latent size, more tokens never reconstruct worse than fewer tokens."""
    for _, group in table.groupby("latent_size"):
        mse = group.sort_values("tokens", ascending=False)["val_mse"].to_numpy()
        if np.any(np.diff(mse) < 0):
            return False
    return True


def sweep_cfg(
    flow_model: VelocityModel,
    vae: FlatVAE,
    stats: LatentStats,
    centroids: np.ndarray,
    config: FlowConfig,
    rng: RngStream,
    samples_per_class: int = 16,
    weights: Sequence[float] = CFG_WEIGHTS,
    starts: Sequence[float] = CFG_STARTS,
) -> pd.DataFrame:
    """Centroid accuracy and within-class diversity of decoded samples per (weight, start) cell.

    Every cell starts from the same noise, so cells differ only by guidance.
    """
    k = flow_model.num_classes
    labels = default_labels(samples_per_class * k, k)
    t_hi = config.cfg_interval[1]
    rows = []
    for w in weights:
        for t_lo in starts:
            cell = replace(config, cfg_weight=w, cfg_interval=(t_lo, t_hi))
            z = sample_latents(flow_model, labels, cell, rng.child("cfg-sweep")).z
            decoded = decode_latents(vae, stats.destandardize(z))
            rows.append({
                "cfg_weight": w,
                "t_lo": t_lo,
                "accuracy": centroid_accuracy(decoded, labels, centroids),
                "diversity": per_class_diversity(decoded, labels, k),
            })
    logger.info(f"CFG sweep: {len(rows)} cells x {len(labels)} samples")
    return pd.DataFrame(rows)
