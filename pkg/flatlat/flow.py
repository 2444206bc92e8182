"""Flow matching on latent token sequences.

Paths are straight lines z_t = (1 - t) z0 + t z1 from Gaussian noise (t=0) to
data (t=1); the network regresses the constant velocity z1 - z0. Timesteps are
warped by t' = t / (kappa - (kappa - 1) t) both when training and on the
sampling grid. Guidance mixes conditional and null-label velocities only while
t is inside the guidance interval.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from flatlat.data.synth import FeatureGrid
from flatlat.errors import ConfigError, ContractError, DimensionError, NumericError, TrainingError
from flatlat.nd.optim import AdamWState, adamw_step
from flatlat.nd.rng import RngStream, derive_seed
from flatlat.nd.tensor import Tensor, no_grad
from flatlat.transformer import AdaLNBlock, FinalLayer, LabelEmbedder, Linear, Module, TimestepEmbedder, param
from flatlat.validate import check_loss

logger = logging.getLogger(__name__)

VelocityFn = Callable[[np.ndarray, float, np.ndarray], np.ndarray]
LOG_COLUMNS = ["step", "loss", "ema_loss"]


@dataclass(frozen=True)
class FlowConfig:
    kappa: float = 3.0
    euler_steps: int = 50
    cfg_weight: float = 4.5
    cfg_interval: tuple[float, float] = (0.225, 1.0)
    label_dropout: float = 0.1
    ema_decay: float = 0.9995
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.0
    batch_size: int = 64
    train_steps: int = 5000
    log_every: int = 100
    model_dim: int = 64
    depth: int = 6
    heads: int = 4

    def __post_init__(self):
        t_lo, t_hi = self.cfg_interval
        if self.kappa < 1:
            raise ConfigError(f"flow.kappa must be >= 1, got {self.kappa}")
        if self.euler_steps < 1:
            raise ConfigError(f"flow.euler_steps must be positive, got {self.euler_steps}")
        if self.cfg_weight < 1:
            raise ConfigError(f"flow.cfg_weight must be >= 1, got {self.cfg_weight}")
        if not 0.0 <= t_lo < t_hi <= 1.0:
            raise ConfigError(f"flow.cfg_interval must satisfy 0 <= t_lo < t_hi <= 1, got {self.cfg_interval}")
        if not 0.0 <= self.label_dropout < 1.0:
            raise ConfigError(f"flow.label_dropout must be in [0, 1), got {self.label_dropout}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"flow.ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.lr <= 0 or self.batch_size < 1 or self.log_every < 1 or self.train_steps < 0:
            raise ConfigError("flow.lr, batch_size and log_every must be positive")
        if self.model_dim % self.heads:
            raise ConfigError(f"flow.model_dim={self.model_dim} is not divisible by heads={self.heads}")


@dataclass
class FlowState:
    z_t: np.ndarray
    t: float


def time_shift(t, kappa: float):
    """t / (kappa - (kappa - 1) t); works on floats and arrays.

    Any kappa > 0 is accepted; kappa and 1/kappa are inverse maps. Samplers
    require kappa >= 1, which FlowConfig enforces.
    """
    if not kappa > 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    arr = np.asarray(t, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ContractError("time_shift needs t in [0, 1]")
    out = arr / (kappa - (kappa - 1.0) * arr)
    return float(out) if np.ndim(t) == 0 else out


def interpolate(z0: np.ndarray, z1: np.ndarray, t: float) -> FlowState:
    if np.shape(z0) != np.shape(z1):
        raise DimensionError(f"interpolant endpoints differ in shape: {np.shape(z0)} vs {np.shape(z1)}")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return FlowState((1.0 - t) * np.asarray(z0) + t * np.asarray(z1), float(t))


class VelocityModel(Module):
    """DiT over a T-token latent sequence, conditioned on time and class through adaLN-Zero."""

    def __init__(self, tokens: int, latent_dim: int, num_classes: int, config: FlowConfig, rng: RngStream):
        d = config.model_dim
        self.tokens = tokens
        self.latent_dim = latent_dim
        self.latent_in = Linear(latent_dim, d, rng.child("in"))
        self.pos = param(rng.child("pos").normal((tokens, d)) * 0.02)
        self.time_embed = TimestepEmbedder(d, rng.child("time"))
        self.label_embed = LabelEmbedder(num_classes, d, rng.child("label"))
        self.blocks = [AdaLNBlock(d, config.heads, rng.child(f"block-{i}")) for i in range(config.depth)]
        self.final = FinalLayer(d, latent_dim, rng.child("final"))

    @property
    def num_classes(self) -> int:
        return self.label_embed.num_classes

    @property
    def null_label(self) -> int:
        return self.label_embed.null_label

    def forward(self, z: Union[Tensor, np.ndarray], t, labels) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
        if z.ndim != 3 or z.shape[1:] != (self.tokens, self.latent_dim):
            raise DimensionError(f"velocity model expects [B, {self.tokens}, {self.latent_dim}], got {z.shape}")
        b = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (b,))
        cond = self.time_embed(t) + self.label_embed(labels)
        h = self.latent_in(z) + self.pos
        for block in self.blocks:
            h = block(h, cond)
        return self.final(h, cond)

    def velocity(self, z: np.ndarray, t: float, labels: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(z, t, labels).data


def fm_loss(
    velocity: Callable[[Tensor, np.ndarray, np.ndarray], Tensor],
    z1: np.ndarray,
    labels: np.ndarray,
    rng: RngStream,
    config: FlowConfig,
    null_label: Optional[int] = None,
) -> Tensor:
    """Mean squared error between predicted and target velocity over the batch.

    t is drawn uniformly and then time-shifted; labels are swapped for the null
    label with probability `label_dropout` when a null label is given.
    """
    z1 = np.asarray(z1)
    if len(z1) == 0:
        raise ContractError("fm_loss needs a non-empty batch")
    b = len(z1)
    z0 = rng.normal(z1.shape, dtype=z1.dtype)
    t = time_shift(rng.uniform(b), config.kappa)
    labels = np.asarray(labels, dtype=np.int64)
    if null_label is not None and config.label_dropout > 0:
        labels = np.where(rng.bernoulli(config.label_dropout, b), null_label, labels)
    tb = t.reshape((b,) + (1,) * (z1.ndim - 1))
    z_t = (1.0 - tb) * z0 + tb * z1
    pred = velocity(Tensor(z_t), t, labels)
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    diff = pred - (z1 - z0)
    return (diff * diff).mean()


def guided_velocity(model, z_t: np.ndarray, t: float, labels: np.ndarray, config: FlowConfig) -> np.ndarray:
    """Conditional velocity, mixed with the null-label velocity inside the guidance interval."""
    v_cond = model.velocity(z_t, t, labels)
    t_lo, t_hi = config.cfg_interval
    if config.cfg_weight == 1.0 or not t_lo <= t <= t_hi:
        return v_cond
    v_uncond = model.velocity(z_t, t, np.full(len(z_t), model.null_label))
    return v_uncond + config.cfg_weight * (v_cond - v_uncond)


def guided_field(model, config: FlowConfig) -> VelocityFn:
    return lambda z, t, labels: guided_velocity(model, z, t, labels, config)


def sampling_grid(steps: int, kappa: float) -> np.ndarray:
    """steps + 1 times: uniform in raw t, then time-shifted."""
    return time_shift(np.linspace(0.0, 1.0, steps + 1), kappa)


@dataclass
class SampleResult:
    z: np.ndarray
    trajectory: list[np.ndarray] = field(default_factory=list)
    times: Optional[np.ndarray] = None


def euler_sample(
    velocity: VelocityFn,
    labels: np.ndarray,
    config: FlowConfig,
    rng: Optional[RngStream] = None,
    z0: Optional[np.ndarray] = None,
    shape: Optional[tuple[int, int]] = None,
    record: bool = False,
) -> SampleResult:
    """Integrate dz/dt = v(z, t) from t=0 to t=1 on the shifted grid."""
    labels = np.asarray(labels, dtype=np.int64)
    if z0 is None:
        if rng is None or shape is None:
            raise ContractError("euler_sample needs either z0 or both rng and shape")
        z0 = rng.normal((len(labels),) + tuple(shape))
    z = np.array(z0, dtype=np.float64, copy=True)
    grid = sampling_grid(config.euler_steps, config.kappa)
    trajectory = [z.copy()] if record else []
    for i in range(config.euler_steps):
        t = float(grid[i])
        z = z + (grid[i + 1] - grid[i]) * velocity(z, t, labels)
        if not np.isfinite(z).all():
            raise NumericError(f"sampler state became non-finite at step {i + 1} (t={t:.4f})")
        if record:
            trajectory.append(z.copy())
    return SampleResult(z, trajectory, grid if record else None)


def sample_latents(model: VelocityModel, labels: np.ndarray, config: FlowConfig, rng: RngStream,
                   record: bool = False) -> SampleResult:
    return euler_sample(
        guided_field(model, config), labels, config, rng, shape=(model.tokens, model.latent_dim), record=record
    )


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float


def ema_init(model: Module, decay: float) -> EmaState:
    return EmaState({k: v.copy() for k, v in model.state_dict().items()}, decay)


def ema_update(ema: EmaState, params: Mapping[str, Union[Tensor, np.ndarray]]) -> None:
    """shadow <- decay * shadow + (1 - decay) * live, in place."""
    if set(params) != set(ema.shadow):
        raise DimensionError("EMA shadow and live parameters have different names")
    for name, p in params.items():
        live = p.data if isinstance(p, Tensor) else np.asarray(p)
        s = ema.shadow[name]
        if s.shape != live.shape:
            raise DimensionError(f"EMA shadow {name} has shape {s.shape}, live has {live.shape}")
        s *= ema.decay
        s += (1.0 - ema.decay) * live


def ema_model(model: Module, ema: EmaState) -> Module:
    """A copy of `model` carrying the shadow weights."""
    shadow = copy.deepcopy(model)
    shadow.load_state_dict(ema.shadow)
    return shadow


@dataclass
class LatentStats:
    """Per-coordinate standardization of [N, T, d] latents."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, latents: np.ndarray, eps: float = 1e-6) -> "LatentStats":
        return cls(latents.mean(axis=0), np.maximum(latents.std(axis=0), eps))

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return (z - self.mean) / self.std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class FlowTrainResult:
    model: VelocityModel
    ema: EmaState
    log: pd.DataFrame

    def ema_model(self) -> VelocityModel:
        return ema_model(self.model, self.ema)


def _heldout_loss(model: VelocityModel, z1: np.ndarray, labels: np.ndarray, config: FlowConfig, seed: int) -> float:
    with no_grad():
        return fm_loss(model, z1, labels, RngStream(seed), config, model.null_label).item()


def train_flow(
    latents: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    config: FlowConfig,
    rng: RngStream,
    model: Optional[VelocityModel] = None,
    log_path: Optional[Path] = None,
) -> FlowTrainResult:
    """Constant-LR AdamW on the flow-matching loss with a per-step EMA of the weights."""
    latents = np.asarray(latents)
    labels = np.asarray(labels, dtype=np.int64)
    if latents.ndim != 3 or len(latents) == 0:
        raise ContractError(f"train_flow needs [N, T, d] latents, got {latents.shape}")
    if len(labels) != len(latents):
        raise DimensionError(f"{len(labels)} labels for {len(latents)} latents")
    n, tokens, dim = latents.shape
    model = model or VelocityModel(tokens, dim, num_classes, config, rng.child("init"))
    params = model.parameters()
    opt = AdamWState(beta1=config.betas[0], beta2=config.betas[1], weight_decay=config.weight_decay)
    ema = ema_init(model, config.ema_decay)
    batches = rng.child("batches")
    noise = rng.child("noise")
    held_idx = rng.child("heldout").permutation(n)[: min(n, config.batch_size)]
    held_seed = derive_seed(rng.seed, "heldout-noise")
    logger.info(f"Training flow model on {n} latents [{tokens}x{dim}] for {config.train_steps} steps")

    rows = []
    window: list[float] = []
    for step in range(1, config.train_steps + 1):
        idx = batches.integers(0, n, size=config.batch_size)
        try:
            loss = fm_loss(model, latents[idx], labels[idx], noise, config, model.null_label)
            value = loss.item()
            check_loss(value, step)
            model.zero_grad()
            loss.backward()
            adamw_step(params, None, opt, config.lr)
        except NumericError as e:
            if isinstance(e, TrainingError):
                raise
            raise TrainingError(f"flow training diverged: {e}", step) from e
        ema_update(ema, params)
        window.append(value)
        if step == 1 or step % config.log_every == 0 or step == config.train_steps:
            shadow = ema_model(model, ema)
            ema_loss = _heldout_loss(shadow, latents[held_idx], labels[held_idx], config, held_seed)
            rows.append([step, float(np.mean(window)), ema_loss])
            logger.info(f"step {step}: loss={rows[-1][1]:.5f} ema_loss={ema_loss:.5f}")
            window = []

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(log_path, index=False)
    return FlowTrainResult(model, ema, log)


def latents_to_grids(z: np.ndarray, labels: np.ndarray) -> list[FeatureGrid]:
    """Latent samples as 1 x T grids, so they can be stored in FGRD files."""
    _, tokens, dim = z.shape
    return [FeatureGrid(1, tokens, np.asarray(s, dtype=np.float32).reshape(tokens, dim), int(c)) for s, c in zip(z, labels)]


def grids_to_latents(grids: list[FeatureGrid]) -> tuple[np.ndarray, np.ndarray]:
    if not grids:
        raise ContractError("no latent grids to load")
    z = np.stack([g.features for g in grids]).astype(np.float64)
    return z, np.array([g.class_id for g in grids], dtype=np.int64)


def default_labels(count: int, num_classes: int) -> np.ndarray:
    return np.arange(count, dtype=np.int64) % num_classes
