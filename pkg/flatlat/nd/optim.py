"""AdamW with decoupled weight decay and the warmup-stable-decay LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from flatlat.errors import ConfigError, ContractError, DimensionError
from flatlat.nd.tensor import Tensor


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.02
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(p: Tensor) -> bool:
    """Only 2-D (and higher) weights decay; gains and biases do not."""
    return p.ndim >= 2


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Optional[Mapping[str, Optional[np.ndarray]]],
    state: AdamWState,
    lr: float,
) -> None:
    """One bias-corrected AdamW update, in place. Missing grads count as zero."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"grad for {name} has shape {g.shape}, param has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"moment for {name} has shape {m.shape}, param has {p.shape}")
        if state.weight_decay and decays(p):
            p.data *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


@dataclass(frozen=True)
class WsdSchedule:
    """Linear warmup, constant plateau, cosine decay; all lengths in epochs."""

    warmup_epochs: int = 5
    stable_epochs: int = 40
    decay_epochs: int = 5
    warmup_lr: float = 1e-6
    peak_lr: float = 1e-4
    min_lr: float = 1e-8

    def __post_init__(self):
        if min(self.warmup_epochs, self.stable_epochs, self.decay_epochs) < 0:
            raise ConfigError("schedule phase lengths must be non-negative")
        if min(self.warmup_lr, self.peak_lr, self.min_lr) <= 0:
            raise ConfigError("schedule learning rates must be positive")
        if self.warmup_lr > self.peak_lr or self.min_lr > self.peak_lr:
            raise ConfigError("warmup_lr and min_lr must not exceed peak_lr")

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.stable_epochs + self.decay_epochs

    def with_decay(self, extra_stable: int, decay_epochs: Optional[int] = None) -> "WsdSchedule":
        """Resume from the plateau: extend it, then append a fresh decay phase."""
        return replace(
            self,
            stable_epochs=self.stable_epochs + extra_stable,
            decay_epochs=self.decay_epochs if decay_epochs is None else decay_epochs,
        )


def wsd_lr(schedule: WsdSchedule, epoch_fraction: float) -> float:
    s = schedule
    if epoch_fraction < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch_fraction}")
    if epoch_fraction > s.total_epochs:
        raise ContractError(f"epoch {epoch_fraction} beyond schedule end {s.total_epochs}")
    e = float(epoch_fraction)
    if e < s.warmup_epochs:
        return s.warmup_lr + (s.peak_lr - s.warmup_lr) * e / s.warmup_epochs
    e -= s.warmup_epochs
    if e <= s.stable_epochs or s.decay_epochs == 0:
        return s.peak_lr
    frac = (e - s.stable_epochs) / s.decay_epochs
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * frac))

