"""Synthetic images and a frozen feature extractor standing in for a pretrained backbone.

Each class is an oriented grating with a class-specific orientation and
wavelength. Images add per-image jitter, a smooth random field, a blob, a small
warp, pixel noise and a random horizontal flip. The frozen encoder maps
overlapping pixel windows through a fixed random projection and blends every
patch with its neighbours, so feature similarity falls off with distance.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from flatlat.errors import ConfigError, ContractError, DimensionError
from flatlat.nd.rng import RngStream, derive_seed

logger = logging.getLogger(__name__)

WAVELENGTHS = (3.0, 5.0, 7.0, 9.0)


@dataclass
class SyntheticImage:
    pixels: np.ndarray
    class_id: int

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class FeatureGrid:
    """Ph x Pw patch features of dimension D, stored row-major as [P, D]."""

    grid_h: int
    grid_w: int
    features: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.grid_h * self.grid_w:
            raise DimensionError(
                f"features {self.features.shape} do not match a {self.grid_h}x{self.grid_w} grid"
            )

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def as_image(self) -> np.ndarray:
        return self.features.reshape(self.grid_h, self.grid_w, self.feature_dim)


@dataclass(frozen=True)
class SynthParams:
    """Image generator settings. `amplitude` scales every random perturbation."""

    num_classes: int = 4
    image_size: int = 32
    amplitude: float = 1.0
    orientation_jitter_deg: float = 15.0
    wavelength_jitter: float = 0.10
    contrast: float = 0.25
    field_amp: float = 0.20
    blob_amp: float = 0.35
    warp_px: float = 1.0
    pixel_noise: float = 0.03
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.image_size < 1:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        if self.amplitude < 0:
            raise ConfigError(f"amplitude must be non-negative, got {self.amplitude}")


def _grating(size: int, theta: float, wavelength: float, phase: float, contrast: float,
             dy: Optional[np.ndarray] = None, dx: Optional[np.ndarray] = None) -> np.ndarray:
    c = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if dy is not None:
        yy = yy + dy
        xx = xx + dx
    proj = xx * math.cos(theta) + yy * math.sin(theta)
    return 0.5 + contrast * np.cos(2.0 * math.pi * proj / wavelength + phase)


def class_orientation(class_id: int, num_classes: int) -> float:
    return math.pi * class_id / num_classes


def class_wavelength(class_id: int) -> float:
    return WAVELENGTHS[class_id % len(WAVELENGTHS)]


def class_template(class_id: int, params: SynthParams = SynthParams()) -> np.ndarray:
    """Noise-free grating of one class."""
    if not 0 <= class_id < params.num_classes:
        raise ContractError(f"class_id {class_id} outside [0, {params.num_classes})")
    return _grating(
        params.image_size,
        class_orientation(class_id, params.num_classes),
        class_wavelength(class_id),
        0.0,
        params.contrast,
    )


def _smooth_field(rng: RngStream, size: int, components: int = 3) -> np.ndarray:
    """Sum of a few random low-frequency cosines, unit-ish amplitude."""
    c = np.arange(size, dtype=np.float64) / size
    yy, xx = np.meshgrid(c, c, indexing="ij")
    freqs = rng.integers(-2, 3, size=(components, 2))
    phases = rng.uniform(components) * 2.0 * math.pi
    weights = rng.normal(components) / math.sqrt(components)
    out = np.zeros((size, size))
    for (fy, fx), ph, w in zip(freqs, phases, weights):
        out += w * np.cos(2.0 * math.pi * (fy * yy + fx * xx) + ph)
    return out


def generate_image(class_id: int, rng: RngStream, params: SynthParams = SynthParams()) -> SyntheticImage:
    if not 0 <= class_id < params.num_classes:
        raise ContractError(f"class_id {class_id} outside [0, {params.num_classes})")
    a = params.amplitude
    n = params.image_size
    theta = class_orientation(class_id, params.num_classes)
    theta += a * math.radians(params.orientation_jitter_deg) * (2.0 * rng.uniform() - 1.0)
    wavelength = class_wavelength(class_id) * (1.0 + a * params.wavelength_jitter * (2.0 * rng.uniform() - 1.0))
    phase = a * 2.0 * math.pi * float(rng.uniform())
    dy = a * params.warp_px * _smooth_field(rng, n)
    dx = a * params.warp_px * _smooth_field(rng, n)
    img = _grating(n, theta, wavelength, phase, params.contrast, dy, dx)

    img += a * params.field_amp * _smooth_field(rng, n)
    cy, cx = rng.uniform(2) * (n - 1)
    radius = n * (0.1 + 0.15 * float(rng.uniform()))
    yy, xx = np.mgrid[0:n, 0:n]
    sign = 1.0 if rng.uniform() < 0.5 else -1.0
    img += a * sign * params.blob_amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))
    img += a * params.pixel_noise * rng.normal((n, n))
    if a > 0 and bool(rng.bernoulli(params.flip_prob)):
        img = img[:, ::-1]
    return SyntheticImage(np.clip(img, 0.0, 1.0), class_id)


# The 3x3 binomial kernel without its centre, normalised so neighbours weigh 0.5 in total.
_NEIGHBOUR_WEIGHTS = np.array([[1.0, 2.0, 1.0], [2.0, 0.0, 2.0], [1.0, 2.0, 1.0]]) / 24.0


@dataclass
class FrozenEncoder:
    """Fixed random patch featurizer; never trained."""

    seed: int
    patch: int = 4
    window: int = 6
    feature_dim: int = 16
    center_weight: float = 0.5
    weight: np.ndarray = field(init=False, repr=False)
    bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.window < self.patch or (self.window - self.patch) % 2:
            raise ConfigError(f"window {self.window} must cover patch {self.patch} symmetrically")
        rng = RngStream(derive_seed(self.seed, "frozen-encoder"))
        fan_in = self.window * self.window
        self.weight = rng.normal((fan_in, self.feature_dim)) * (2.0 / math.sqrt(fan_in))
        self.bias = rng.normal(self.feature_dim) * 0.1

    def windows(self, pixels: np.ndarray) -> np.ndarray:
        """[Ph, Pw, window*window] pixel windows centred on each patch."""
        h, w = pixels.shape
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image {h}x{w} is not divisible by patch size {self.patch}")
        pad = (self.window - self.patch) // 2
        padded = np.pad(pixels, pad, mode="reflect") if pad else pixels
        view = np.lib.stride_tricks.sliding_window_view(padded, (self.window, self.window))
        view = view[:: self.patch, :: self.patch]
        return view.reshape(h // self.patch, w // self.patch, -1)

    def blend(self, feats: np.ndarray) -> np.ndarray:
        """Mix every patch with its 3x3 neighbourhood; weights renormalised at borders."""
        gh, gw, _ = feats.shape
        padded = np.pad(feats, ((1, 1), (1, 1), (0, 0)))
        mask = np.pad(np.ones((gh, gw)), 1)
        acc = np.zeros_like(feats)
        norm = np.zeros((gh, gw))
        for dy in range(3):
            for dx in range(3):
                k = _NEIGHBOUR_WEIGHTS[dy, dx]
                if k == 0.0:
                    continue
                acc += k * padded[dy : dy + gh, dx : dx + gw]
                norm += k * mask[dy : dy + gh, dx : dx + gw]
        neighbours = (1.0 - self.center_weight) * acc / norm[..., None]
        return self.center_weight * feats + neighbours

    def __call__(self, image: SyntheticImage) -> FeatureGrid:
        win = self.windows(image.pixels) - 0.5
        feats = self.blend(np.tanh(win @ self.weight + self.bias))
        gh, gw, d = feats.shape
        return FeatureGrid(gh, gw, feats.reshape(gh * gw, d), image.class_id)


def frozen_encode(image: SyntheticImage, encoder_seed: int, **kwargs) -> FeatureGrid:
    return FrozenEncoder(encoder_seed, **kwargs)(image)


def patch_pixels(image: SyntheticImage, patch: int = 4) -> np.ndarray:
    """Raw [P, patch*patch] pixel vectors, the baseline for compressibility comparisons."""
    h, w = image.pixels.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {patch}")
    blocks = image.pixels.reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    return blocks.reshape(-1, patch * patch)


@dataclass
class GridDataset:
    """A stack of same-shaped grids: features [N, P, D] plus labels [N]."""

    features: np.ndarray
    labels: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.features.ndim != 3 or self.features.shape[1] != self.grid_h * self.grid_w:
            raise DimensionError(f"features {self.features.shape} do not match {self.grid_h}x{self.grid_w}")
        if len(self.labels) != len(self.features):
            raise DimensionError(f"{len(self.labels)} labels for {len(self.features)} grids")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def grids(self) -> list[FeatureGrid]:
        return [
            FeatureGrid(self.grid_h, self.grid_w, f, int(c)) for f, c in zip(self.features, self.labels)
        ]

    def subset(self, index) -> "GridDataset":
        return GridDataset(self.features[index], self.labels[index], self.grid_h, self.grid_w)

    @classmethod
    def from_grids(cls, grids: Sequence[FeatureGrid]) -> "GridDataset":
        if not grids:
            raise ContractError("cannot build a dataset from zero grids")
        g0 = grids[0]
        for g in grids:
            if (g.grid_h, g.grid_w, g.feature_dim) != (g0.grid_h, g0.grid_w, g0.feature_dim):
                raise DimensionError("grids in one dataset must share their shape")
        feats = np.stack([g.features for g in grids])
        labels = np.array([g.class_id for g in grids], dtype=np.int64)
        return cls(feats, labels, g0.grid_h, g0.grid_w)


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray, eps: float = 1e-8) -> "Standardizer":
        flat = features.reshape(-1, features.shape[-1])
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), eps))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def invert(self, features: np.ndarray) -> np.ndarray:
        return features * self.std + self.mean


@dataclass
class DatasetManifest:
    num_classes: int
    train_count: int
    val_count: int
    seed: int
    encoder_seed: int
    grid_h: int
    grid_w: int
    feature_dim: int
    standardized: bool = True
    feature_mean: list[float] = field(default_factory=list)
    feature_std: list[float] = field(default_factory=list)
    synth: dict[str, Any] = field(default_factory=dict)

    def standardizer(self) -> Optional[Standardizer]:
        if not self.standardized or not self.feature_mean:
            return None
        return Standardizer(np.asarray(self.feature_mean), np.asarray(self.feature_std))


def _make_grid(class_id: int, seed: int, params: SynthParams, encoder: FrozenEncoder) -> FeatureGrid:
    return encoder(generate_image(class_id, RngStream(seed), params))


def generate_split(
    count: int,
    split_seed: int,
    params: SynthParams,
    encoder: FrozenEncoder,
    n_jobs: int = 1,
) -> GridDataset:
    """`count` encoded images with balanced labels and one derived seed per image."""
    if count < 1:
        raise ContractError(f"split size must be positive, got {count}")
    jobs = (
        delayed(_make_grid)(i % params.num_classes, derive_seed(split_seed, f"image-{i}"), params, encoder)
        for i in range(count)
    )
    grids = Parallel(n_jobs=n_jobs)(jobs)
    return GridDataset.from_grids(grids)


def build_dataset(
    train_count: int,
    val_count: int,
    seed: int,
    encoder_seed: Optional[int] = None,
    params: SynthParams = SynthParams(),
    patch: int = 4,
    window: int = 6,
    feature_dim: int = 16,
    standardize: bool = True,
    n_jobs: int = 1,
) -> tuple[GridDataset, GridDataset, DatasetManifest]:
    """Train and validation splits from disjoint sub-seeds, standardized with train statistics."""
    encoder_seed = derive_seed(seed, "encoder") if encoder_seed is None else encoder_seed
    encoder = FrozenEncoder(encoder_seed, patch=patch, window=window, feature_dim=feature_dim)
    logger.info(f"Generating {train_count} train / {val_count} val grids (seed={seed}, n_jobs={n_jobs})")
    train = generate_split(train_count, derive_seed(seed, "train"), params, encoder, n_jobs)
    val = generate_split(val_count, derive_seed(seed, "val"), params, encoder, n_jobs)
    manifest = DatasetManifest(
        num_classes=params.num_classes,
        train_count=train_count,
        val_count=val_count,
        seed=seed,
        encoder_seed=encoder_seed,
        grid_h=train.grid_h,
        grid_w=train.grid_w,
        feature_dim=train.feature_dim,
        standardized=standardize,
        synth={**asdict(params), "patch": patch, "window": window},
    )
    if standardize:
        scaler = Standardizer.fit(train.features)
        train.features = scaler.apply(train.features)
        val.features = scaler.apply(val.features)
        manifest.feature_mean = scaler.mean.tolist()
        manifest.feature_std = scaler.std.tolist()
    return train, val, manifest


def write_manifest(path: Path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True), encoding="utf-8")


def read_manifest(path: Path) -> DatasetManifest:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"dataset manifest not found: {p}")
    return DatasetManifest(**json.loads(p.read_text(encoding="utf-8")))
