"""Register-token VAE that flattens a Ph x Pw feature grid into T latent tokens of dim d.

Encoder: patch features + positional embeddings, with T learnable registers
prepended, run through pre-norm blocks; only the register outputs are kept and
projected to (mu, logvar). Decoder: P learnable queries followed by the
projected latents (plus positional embeddings) run through blocks; the query
outputs are projected back to the feature dimension.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

from flatlat.data.synth import GridDataset
from flatlat.errors import ConfigError, ContractError, NumericError, TrainingError
from flatlat.nd.optim import AdamWState, WsdSchedule, adamw_step, wsd_lr
from flatlat.nd.rng import RngStream
from flatlat.nd.tensor import Tensor, clip, concat, exp, no_grad
from flatlat.transformer import Block, LayerNorm, Linear, Module, RegisterBank, concat_registers, param
from flatlat.validate import check_loss

logger = logging.getLogger(__name__)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
LOG_COLUMNS = ["epoch", "lr", "train_recon", "train_kl", "val_recon", "val_kl", "total"]


def beta_for(tokens: int, latent_dim: int, beta_ref: float = 1e-6, dim_ref: int = 512) -> float:
    """KL weight keeping beta * T * d constant across latent shapes."""
    if tokens <= 0 or latent_dim <= 0 or dim_ref <= 0 or beta_ref <= 0:
        raise ContractError(
            f"beta_for needs positive arguments, got T={tokens} d={latent_dim} "
            f"beta_ref={beta_ref} dim_ref={dim_ref}"
        )
    return beta_ref * (dim_ref / (tokens * latent_dim))


def compression_ratio(patches: int, feature_dim: int, tokens: int, latent_dim: int) -> float:
    return patches * feature_dim / (tokens * latent_dim)


@dataclass(frozen=True)
class VaeConfig:
    grid_h: int = 8
    grid_w: int = 8
    feature_dim: int = 16
    tokens: int = 8
    latent_dim: int = 8
    width: int = 64
    heads: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 2
    extra_registers: int = 0
    beta_ref: float = 1e-6
    dim_ref: int = 512

    def __post_init__(self):
        for name in ("grid_h", "grid_w", "feature_dim", "tokens", "latent_dim", "width", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"vae.{name} must be positive, got {getattr(self, name)}")
        if min(self.encoder_depth, self.decoder_depth, self.extra_registers) < 0:
            raise ConfigError("vae depths and extra_registers must be non-negative")
        if self.tokens > self.num_patches:
            raise ConfigError(f"vae.tokens={self.tokens} exceeds the {self.num_patches} patches")
        if self.width % self.heads:
            raise ConfigError(f"vae.width={self.width} is not divisible by heads={self.heads}")
        if self.beta_ref <= 0 or self.dim_ref <= 0:
            raise ConfigError("vae.beta_ref and vae.dim_ref must be positive")

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def latent_size(self) -> int:
        return self.tokens * self.latent_dim

    @property
    def beta(self) -> float:
        return beta_for(self.tokens, self.latent_dim, self.beta_ref, self.dim_ref)

    @property
    def compression_ratio(self) -> float:
        return compression_ratio(self.num_patches, self.feature_dim, self.tokens, self.latent_dim)


@dataclass
class LatentPosterior:
    mu: Tensor
    logvar: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mu.shape


@dataclass
class VaeLossReport:
    recon: float
    kl: float
    beta: float
    total: float
    loss: Optional[Tensor] = field(default=None, repr=False)


def kl_divergence(post: LatentPosterior) -> Tensor:
    """Closed-form KL(q || N(0, I)) summed over the T*d latent dims, averaged over the batch."""
    per_dim = exp(post.logvar) + post.mu * post.mu - 1.0 - post.logvar
    total = per_dim.sum() * 0.5
    batch = post.mu.size // math.prod(post.mu.shape[-2:]) if post.mu.ndim >= 2 else 1
    return total * (1.0 / batch)


def reparameterize(post: LatentPosterior, rng: RngStream) -> Tensor:
    eps = rng.normal(post.mu.shape, dtype=post.mu.dtype)
    return post.mu + exp(post.logvar * 0.5) * eps


def _as_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


class FlatVAE(Module):
    def __init__(self, config: VaeConfig, rng: RngStream):
        c = config
        self.config = c
        enc = rng.child("encoder")
        self.patch_in = Linear(c.feature_dim, c.width, enc.child("in"))
        self.patch_pos = param(enc.child("pos").normal((c.num_patches, c.width)) * 0.02)
        self.registers = RegisterBank(c.tokens + c.extra_registers, c.width, enc.child("registers"))
        self.encoder_blocks = [Block(c.width, c.heads, enc.child(f"block-{i}")) for i in range(c.encoder_depth)]
        self.encoder_norm = LayerNorm(c.width)
        self.to_posterior = Linear(c.width, 2 * c.latent_dim, enc.child("posterior"))

        dec = rng.child("decoder")
        self.latent_in = Linear(c.latent_dim, c.width, dec.child("in"))
        self.latent_pos = param(dec.child("pos").normal((c.tokens, c.width)) * 0.02)
        self.queries = param(dec.child("queries").normal((c.num_patches, c.width)) * 0.02)
        self.decoder_registers = RegisterBank(c.extra_registers, c.width, dec.child("registers"))
        self.decoder_blocks = [Block(c.width, c.heads, dec.child(f"block-{i}")) for i in range(c.decoder_depth)]
        self.decoder_norm = LayerNorm(c.width)
        self.patch_out = Linear(c.width, c.feature_dim, dec.child("out"))

    def _check(self, x: Tensor, last: tuple[int, int], what: str) -> None:
        if x.ndim not in (2, 3) or x.shape[-2:] != last:
            raise ConfigError(f"{what} has shape {x.shape}, expected [..., {last[0]}, {last[1]}]")

    def encode(self, features: Union[Tensor, np.ndarray]) -> LatentPosterior:
        c = self.config
        x = _as_tensor(features)
        self._check(x, (c.num_patches, c.feature_dim), "feature grid")
        h = concat_registers(self.patch_in(x) + self.patch_pos, self.registers)
        for block in self.encoder_blocks:
            h = block(h)
        out = self.to_posterior(self.encoder_norm(h[..., : c.tokens, :]))
        mu = out[..., : c.latent_dim]
        logvar = clip(out[..., c.latent_dim :], LOGVAR_MIN, LOGVAR_MAX)
        return LatentPosterior(mu, logvar)

    def decode(self, z: Union[Tensor, np.ndarray]) -> Tensor:
        c = self.config
        z = _as_tensor(z)
        self._check(z, (c.tokens, c.latent_dim), "latent")
        lat = self.latent_in(z) + self.latent_pos
        queries = self.queries
        if z.ndim == 3:
            queries = queries.reshape(1, *queries.shape) + Tensor(np.zeros((z.shape[0], 1, 1), dtype=z.dtype))
        h = concat([queries, lat], axis=-2)
        h = concat_registers(h, self.decoder_registers)
        for block in self.decoder_blocks:
            h = block(h)
        start = c.extra_registers
        return self.patch_out(self.decoder_norm(h[..., start : start + c.num_patches, :]))

    def reconstruct(self, features: np.ndarray) -> np.ndarray:
        """Posterior-mean reconstruction without recording a tape."""
        with no_grad():
            return self.decode(self.encode(features).mu).data


def vae_loss(
    model: FlatVAE,
    features: Union[Tensor, np.ndarray],
    beta: float,
    rng: Optional[RngStream] = None,
) -> VaeLossReport:
    """recon (MSE over all P*D entries) + beta * KL. Without `rng` the posterior mean is decoded."""
    x = _as_tensor(features)
    post = model.encode(x)
    z = post.mu if rng is None else reparameterize(post, rng)
    diff = model.decode(z) - x
    recon = (diff * diff).mean()
    kl = kl_divergence(post)
    loss = recon + kl * beta
    return VaeLossReport(recon.item(), kl.item(), beta, loss.item(), loss)


def baseline_mse(train: GridDataset, val: GridDataset) -> float:
    """Validation MSE of always predicting the per-feature training mean."""
    mean = train.features.reshape(-1, train.feature_dim).mean(axis=0)
    return float(((val.features - mean) ** 2).mean())


def evaluate(model: FlatVAE, data: GridDataset, batch_size: int = 256) -> tuple[float, float]:
    """(recon MSE, KL per sample) over a dataset using posterior means."""
    recon = kl = 0.0
    n = len(data)
    with no_grad():
        for start in range(0, n, batch_size):
            x = data.features[start : start + batch_size]
            rep = vae_loss(model, x, 0.0)
            recon += rep.recon * len(x)
            kl += rep.kl * len(x)
    return recon / n, kl / n


@dataclass
class VaeTrainResult:
    model: FlatVAE
    log: pd.DataFrame
    best_epoch: int
    best_val_recon: float
    optimizer: AdamWState
    last_state: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def train_vae(
    train: GridDataset,
    val: GridDataset,
    config: VaeConfig,
    schedule: WsdSchedule,
    rng: RngStream,
    batch_size: int = 64,
    epochs: Optional[int] = None,
    model: Optional[FlatVAE] = None,
    optimizer: Optional[AdamWState] = None,
    start_epoch: int = 0,
    log_path: Optional[Path] = None,
    best_state: Optional[dict[str, np.ndarray]] = None,
    best_val_recon: float = math.inf,
    best_epoch: int = 0,
) -> VaeTrainResult:
    """AdamW + WSD training; keeps the weights with the lowest validation reconstruction loss.

    `model` (last-epoch weights), `optimizer` and `start_epoch` resume an earlier run on the
    same schedule; `best_state`, `best_val_recon` and `best_epoch` carry its best checkpoint
    so a worse resumed epoch cannot replace it.
    """
    if len(train) == 0 or len(val) == 0:
        raise ContractError("train_vae needs non-empty train and validation sets")
    if (train.num_patches, train.feature_dim) != (config.num_patches, config.feature_dim):
        raise ConfigError(
            f"dataset grids are {train.num_patches}x{train.feature_dim}, "
            f"config expects {config.num_patches}x{config.feature_dim}"
        )
    epochs = schedule.total_epochs - start_epoch if epochs is None else epochs
    if epochs < 1 or start_epoch + epochs > schedule.total_epochs:
        raise ConfigError(f"{epochs} epochs from {start_epoch} do not fit a {schedule.total_epochs}-epoch schedule")

    model = model or FlatVAE(config, rng.child("init"))
    opt = optimizer or AdamWState(beta1=0.9, beta2=0.999, weight_decay=0.02)
    params = model.parameters()
    noise = rng.child("noise")
    beta = config.beta
    n = len(train)
    steps_per_epoch = math.ceil(n / batch_size)
    logger.info(
        f"Training VAE T={config.tokens} d={config.latent_dim} beta={beta:.3g} "
        f"({n} grids, {steps_per_epoch} steps/epoch, {epochs} epochs)"
    )

    rows = []
    best_val = best_val_recon
    best_state = model.state_dict() if best_state is None else {k: v.copy() for k, v in best_state.items()}
    step = opt.step
    for epoch in range(start_epoch, start_epoch + epochs):
        order = rng.child(f"epoch-{epoch}").permutation(n)
        recon_sum = kl_sum = 0.0
        lr = schedule.warmup_lr
        for i in range(steps_per_epoch):
            idx = order[i * batch_size : (i + 1) * batch_size]
            lr = wsd_lr(schedule, epoch + i / steps_per_epoch)
            step += 1
            try:
                rep = vae_loss(model, train.features[idx], beta, noise)
                check_loss(rep.total, step)
                model.zero_grad()
                rep.loss.backward()
                adamw_step(params, None, opt, lr)
            except NumericError as e:
                if isinstance(e, TrainingError):
                    raise
                raise TrainingError(f"VAE training diverged: {e}", step) from e
            recon_sum += rep.recon * len(idx)
            kl_sum += rep.kl * len(idx)
        val_recon, val_kl = evaluate(model, val)
        train_recon, train_kl = recon_sum / n, kl_sum / n
        rows.append([epoch + 1, lr, train_recon, train_kl, val_recon, val_kl, train_recon + beta * train_kl])
        logger.info(
            f"epoch {epoch + 1}: lr={lr:.3g} train_recon={train_recon:.5f} "
            f"val_recon={val_recon:.5f} val_kl={val_kl:.3f}"
        )
        if val_recon < best_val:
            best_val, best_epoch, best_state = val_recon, epoch + 1, model.state_dict()

    last_state = model.state_dict()
    model.load_state_dict(best_state)
    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(log_path, index=False)
    logger.info(f"Best validation recon {best_val:.5f} at epoch {best_epoch}")
    return VaeTrainResult(model, log, best_epoch, best_val, opt, last_state)


def encode_dataset(model: FlatVAE, data: GridDataset, batch_size: int = 256) -> np.ndarray:
    """Posterior means [N, T, d] for every grid."""
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            out.append(model.encode(data.features[start : start + batch_size]).mu.data)
    return np.concatenate(out, axis=0)


def decode_latents(model: FlatVAE, z: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(z), batch_size):
            out.append(model.decode(z[start : start + batch_size]).data)
    return np.concatenate(out, axis=0)
