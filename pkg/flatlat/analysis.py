"""Representation analyses: token ablation, PCA compressibility, spatial redundancy,
latent noise robustness, k-NN and class-centroid evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from flatlat.errors import ContractError, DimensionError
from flatlat.nd.rng import RngStream
from flatlat.nd.tensor import no_grad
from flatlat.vae import FlatVAE

logger = logging.getLogger(__name__)


@dataclass
class AblationHeatmap:
    """Mean per-patch L2 change of the reconstruction when one latent token is zeroed."""

    maps: np.ndarray  # [T, Ph, Pw]
    samples: int
    split_half: list[float] = field(default_factory=list)

    @property
    def tokens(self) -> int:
        return self.maps.shape[0]


@dataclass
class PcaReport:
    eigenvalues: np.ndarray
    dims_for_threshold: int
    threshold: float
    compression_ratio: float
    cumulative: np.ndarray


@dataclass
class SimilarityCurve:
    distances: np.ndarray
    similarity: np.ndarray
    counts: np.ndarray


@dataclass
class NoiseSweep:
    sigmas: np.ndarray
    errors: np.ndarray
    baseline: float


@dataclass
class KnnReport:
    k: int
    accuracy: float
    predictions: np.ndarray


# -- token ablation ----------------------------------------------------------
def ablation_maps(model: FlatVAE, features: np.ndarray, token_index: int, batch_size: int = 256) -> np.ndarray:
    """Per-sample [N, P] L2 distance between clean and token-ablated reconstructions."""
    c = model.config
    if not 0 <= token_index < c.tokens:
        raise ContractError(f"token index {token_index} outside [0, {c.tokens})")
    out = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            mu = model.encode(features[start : start + batch_size]).mu.data
            clean = model.decode(mu).data
            ablated_z = mu.copy()
            ablated_z[:, token_index, :] = 0.0
            ablated = model.decode(ablated_z).data
            out.append(np.sqrt(((clean - ablated) ** 2).sum(axis=-1)))
    return np.concatenate(out, axis=0)


def token_ablation(model: FlatVAE, features: np.ndarray, token_index: int) -> np.ndarray:
    """Dataset-mean ablation heatmap [Ph, Pw] for one token."""
    features = np.asarray(features)
    if len(features) == 0:
        raise ContractError("token_ablation needs at least one sample")
    c = model.config
    return ablation_maps(model, features, token_index).mean(axis=0).reshape(c.grid_h, c.grid_w)


def split_half_correlation(maps: np.ndarray) -> float:
    """Pearson correlation between the mean maps of the first and second half of the samples."""
    n = len(maps)
    if n < 2:
        return float("nan")
    a = maps[: n // 2].mean(axis=0).ravel()
    b = maps[n // 2 :].mean(axis=0).ravel()
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def ablation_heatmaps(model: FlatVAE, features: np.ndarray) -> AblationHeatmap:
    features = np.asarray(features)
    if len(features) == 0:
        raise ContractError("ablation needs at least one sample")
    c = model.config
    maps, halves = [], []
    for i in range(c.tokens):
        per_sample = ablation_maps(model, features, i)
        maps.append(per_sample.mean(axis=0).reshape(c.grid_h, c.grid_w))
        halves.append(split_half_correlation(per_sample))
    logger.info(f"Ablated {c.tokens} tokens over {len(features)} samples")
    return AblationHeatmap(np.stack(maps), len(features), halves)


def locality_score(heatmap: np.ndarray) -> float:
    """Spatial variance (patch units squared) of a heatmap read as a distribution over positions."""
    h = np.asarray(heatmap, dtype=np.float64)
    mass = h.sum()
    if mass <= 0:
        return float("nan")
    p = h / mass
    yy, xx = np.indices(h.shape)
    cy, cx = (p * yy).sum(), (p * xx).sum()
    return float((p * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum())


# -- PCA ---------------------------------------------------------------------
def pca_compressibility(features: np.ndarray, threshold: float = 0.95) -> PcaReport:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"pca needs an [N, D] matrix, got {x.shape}")
    if len(x) < 2:
        raise ContractError(f"pca needs at least 2 rows, got {len(x)}")
    if not 0.0 < threshold <= 1.0:
        raise ContractError(f"threshold must be in (0, 1], got {threshold}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    eig = np.clip(np.linalg.eigh(cov)[0][::-1], 0.0, None)
    total = eig.sum()
    if total <= 0:
        raise ContractError("pca input has zero variance")
    cumulative = np.cumsum(eig) / total
    r = int(np.searchsorted(cumulative, threshold - 1e-12) + 1)
    r = min(r, len(eig))
    return PcaReport(eig, r, threshold, x.shape[1] / r, cumulative)


# -- spatial redundancy ------------------------------------------------------
def distance_bins(grid_h: int, grid_w: int) -> np.ndarray:
    """[P, P] Euclidean patch distances rounded to the nearest integer."""
    yy, xx = np.indices((grid_h, grid_w))
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=-1))
    return np.rint(d).astype(np.int64)


def spatial_similarity(features: np.ndarray, grid_h: int, grid_w: int) -> SimilarityCurve:
    """Mean cosine similarity of patch pairs per rounded distance, over all grids."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    if len(f) == 0:
        raise ContractError("spatial_similarity needs at least one grid")
    if f.shape[1] != grid_h * grid_w:
        raise DimensionError(f"{f.shape[1]} patches do not form a {grid_h}x{grid_w} grid")
    norms = np.linalg.norm(f, axis=-1, keepdims=True)
    u = f / np.maximum(norms, 1e-12)
    sims = np.einsum("npd,nqd->pq", u, u)
    bins = distance_bins(grid_h, grid_w).ravel()
    sums = np.bincount(bins, weights=sims.ravel())
    counts = np.bincount(bins) * len(f)
    keep = counts > 0
    distances = np.nonzero(keep)[0]
    return SimilarityCurve(distances, sums[keep] / counts[keep], counts[keep])


def is_non_increasing(values: Sequence[float], tolerance: float = 0.0) -> bool:
    v = np.asarray(values, dtype=np.float64)
    return bool(np.all(np.diff(v) <= tolerance))


# -- noise robustness --------------------------------------------------------
def noise_sweep(
    model: FlatVAE,
    features: np.ndarray,
    sigmas: Sequence[float],
    rng: RngStream,
    draws: int = 4,
    batch_size: int = 256,
) -> NoiseSweep:
    """Reconstruction MSE against the clean input after adding sigma * N(0, I) to posterior means."""
    s = np.asarray(sigmas, dtype=np.float64)
    if s.size == 0 or np.any(np.diff(s) <= 0) or s[0] != 0.0 or s[-1] > 1.0:
        raise ContractError("sigma grid must be strictly increasing, start at 0 and stay within [0, 1]")
    if draws < 1:
        raise ContractError("noise_sweep needs at least one draw")
    x = np.asarray(features)
    with no_grad():
        mus = np.concatenate([model.encode(x[i : i + batch_size]).mu.data for i in range(0, len(x), batch_size)])

        def mse(z: np.ndarray) -> float:
            total = 0.0
            for i in range(0, len(z), batch_size):
                rec = model.decode(z[i : i + batch_size]).data
                total += float(((rec - x[i : i + batch_size]) ** 2).sum())
            return total / x.size

        baseline = mse(mus)
        errors = [baseline]
        for sigma in s[1:]:
            draw_rng = rng.child(f"sigma-{sigma:.6f}")
            errs = [mse(mus + sigma * draw_rng.normal(mus.shape)) for _ in range(draws)]
            errors.append(float(np.mean(errs)))
    return NoiseSweep(s, np.asarray(errors), baseline)


# -- k-NN and centroids ------------------------------------------------------
def pooled(features: np.ndarray) -> np.ndarray:
    """Mean-pool any token axes down to [N, D]."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim < 2:
        raise DimensionError(f"expected [N, ..., D] features, got {f.shape}")
    return f.reshape(len(f), -1, f.shape[-1]).mean(axis=1)


def _normalized(f: np.ndarray) -> np.ndarray:
    return f / np.maximum(np.linalg.norm(f, axis=1, keepdims=True), 1e-12)


def knn_eval(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    k: int = 20,
) -> KnnReport:
    """Majority vote among k cosine neighbours; label ties go to the smallest summed distance."""
    if len(train_features) == 0 or len(val_features) == 0:
        raise ContractError("knn_eval needs non-empty train and validation sets")
    if not 1 <= k <= len(train_features):
        raise ContractError(f"k={k} must be in [1, {len(train_features)}]")
    tr = _normalized(pooled(train_features))
    va = _normalized(pooled(val_features))
    train_labels = np.asarray(train_labels, dtype=np.int64)
    sims = va @ tr.T
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(va), dtype=np.int64)
    for i, nb in enumerate(nearest):
        labs = train_labels[nb]
        dist = 1.0 - sims[i, nb]
        cands = np.unique(labs)
        votes = np.array([(labs == c).sum() for c in cands])
        top = cands[votes == votes.max()]
        if len(top) == 1:
            preds[i] = top[0]
        else:
            preds[i] = top[np.argmin([dist[labs == c].sum() for c in top])]
    accuracy = float((preds == np.asarray(val_labels)).mean())
    return KnnReport(k, accuracy, preds)


def class_centroids(features: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    f = pooled(features)
    labels = np.asarray(labels)
    missing = [c for c in range(num_classes) if not np.any(labels == c)]
    if missing:
        raise ContractError(f"no samples for classes {missing}")
    return np.stack([f[labels == c].mean(axis=0) for c in range(num_classes)])


def nearest_centroid(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    f = pooled(features)
    d = ((f[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def centroid_accuracy(features: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> float:
    return float((nearest_centroid(features, centroids) == np.asarray(labels)).mean())


def sample_diversity(features: np.ndarray) -> float:
    """Mean pairwise Euclidean distance between mean-pooled samples."""
    f = pooled(features)
    if len(f) < 2:
        return 0.0
    sq = (f * f).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * f @ f.T, 0.0)
    iu = np.triu_indices(len(f), k=1)
    return float(np.sqrt(d2[iu]).mean())


def per_class_diversity(features: np.ndarray, labels: np.ndarray, num_classes: int) -> Optional[float]:
    labels = np.asarray(labels)
    vals = [sample_diversity(features[labels == c]) for c in range(num_classes) if (labels == c).sum() >= 2]
    return float(np.mean(vals)) if vals else None
