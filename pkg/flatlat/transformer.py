"""Transformer building blocks shared by the autoencoder and the velocity model.

Layers are small `Module` objects owning `Tensor` parameters. Activations are
`[batch, seq, dim]`; 2-D `[seq, dim]` inputs are accepted and returned 2-D.
"""

from __future__ import annotations

import math
from typing import Iterator, Mapping, Optional

import numpy as np

from flatlat.errors import ConfigError, DimensionError
from flatlat.nd.rng import RngStream
from flatlat.nd.tensor import (
    Tensor,
    concat,
    cos,
    get_default_dtype,
    layer_norm,
    silu,
    sin,
    softmax_lastdim,
    swap_last,
    take_rows,
)


def swiglu_hidden(dim: int) -> int:
    """Parameter-matched SwiGLU width, round(8D/3)."""
    return int(round(8 * dim / 3))


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise DimensionError(f"state dict mismatch: missing={missing} unexpected={extra}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=get_default_dtype()), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            bound = math.sqrt(6.0 / (d_in + d_out))
            w = (rng.uniform((d_in, d_out)) * 2.0 - 1.0) * bound
        self.weight = param(w)
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-6):
        self.gain = param(np.ones(dim)) if affine else None
        self.bias = param(np.zeros(dim)) if affine else None
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [seq, dim] or [batch, seq, dim], got {x.shape}")
    return x, False


class Attention(Module):
    """Multi-head scaled dot-product self-attention with output projection."""

    def __init__(self, dim: int, heads: int, rng: RngStream):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible into {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng.child("qkv"))
        self.proj = Linear(dim, dim, rng.child("proj"))

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        b, s, d = x.shape
        h = self.heads
        if d != self.qkv.weight.shape[0]:
            raise DimensionError(f"attention expects dim {self.qkv.weight.shape[0]}, got {d}")
        qkv = self.qkv(x).reshape(b, s, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ swap_last(k)) * (1.0 / math.sqrt(d // h))
        out = softmax_lastdim(scores) @ v
        out = self.proj(out.transpose(0, 2, 1, 3).reshape(b, s, d))
        return out.reshape(s, d) if squeeze else out


class SwiGLU(Module):
    """out = (silu(x W_g) * x W_v) W_d, no biases."""

    def __init__(self, dim: int, rng: RngStream, hidden: Optional[int] = None):
        hidden = hidden or swiglu_hidden(dim)
        self.w_gate = Linear(dim, hidden, rng.child("gate"), bias=False)
        self.w_value = Linear(dim, hidden, rng.child("value"), bias=False)
        self.w_down = Linear(hidden, dim, rng.child("down"), bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.w_down(silu(self.w_gate(x)) * self.w_value(x))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, rng: RngStream):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng.child("attn"))
        self.norm2 = LayerNorm(dim)
        self.ffn = SwiGLU(dim, rng.child("ffn"))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


class RegisterBank(Module):
    """T learnable tokens prepended to a sequence."""

    def __init__(self, count: int, dim: int, rng: RngStream, scale: float = 0.02):
        self.count = count
        self.embeddings = param(rng.normal((count, dim)) * scale)

    def forward(self) -> Tensor:
        return self.embeddings


def concat_registers(patches: Tensor, bank: RegisterBank) -> Tensor:
    """[T registers; P patches] along the sequence axis."""
    if bank.count == 0:
        return patches
    if patches.shape[-1] != bank.embeddings.shape[-1]:
        raise DimensionError(f"register dim {bank.embeddings.shape[-1]} != patch dim {patches.shape[-1]}")
    regs = bank.embeddings
    if patches.ndim == 3:
        b = patches.shape[0]
        regs = regs.reshape(1, *regs.shape) + Tensor(np.zeros((b, 1, 1), dtype=patches.dtype))
    return concat([regs, patches], axis=-2)


def extract_registers(x: Tensor, count: int) -> Tensor:
    return x[..., :count, :]


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1.0 + scale) + shift


class AdaLNBlock(Module):
    """Transformer block conditioned through adaLN-Zero.

    The modulation projection starts at zero, so every gate is zero and a
    fresh block is exactly the identity map.
    """

    def __init__(self, dim: int, heads: int, rng: RngStream):
        self.norm1 = LayerNorm(dim, affine=False)
        self.attn = Attention(dim, heads, rng.child("attn"))
        self.norm2 = LayerNorm(dim, affine=False)
        self.ffn = SwiGLU(dim, rng.child("ffn"))
        self.ada = Linear(dim, 6 * dim, rng.child("ada"), zero=True)

    def modulation(self, cond: Tensor) -> list[Tensor]:
        """(shift_a, scale_a, gate_a, shift_f, scale_f, gate_f), each [batch, 1, dim]."""
        b, d = cond.shape
        mod = self.ada(silu(cond)).reshape(b, 6, 1, d)
        return [mod[:, i] for i in range(6)]

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        if cond.ndim == 1:
            cond = cond.reshape(1, cond.shape[0])
        if cond.shape[-1] != x.shape[-1]:
            raise DimensionError(f"conditioning dim {cond.shape[-1]} != model dim {x.shape[-1]}")
        shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = self.modulation(cond)
        x = x + gate_a * self.attn(modulate(self.norm1(x), shift_a, scale_a))
        x = x + gate_f * self.ffn(modulate(self.norm2(x), shift_f, scale_f))
        return x.reshape(*x.shape[1:]) if squeeze else x


def adaln_block(x: Tensor, cond: Tensor, block: AdaLNBlock) -> Tensor:
    return block(x, cond)


class FinalLayer(Module):
    """adaLN-Zero output head: modulated norm then a zero-initialised projection."""

    def __init__(self, dim: int, out_dim: int, rng: RngStream):
        self.norm = LayerNorm(dim, affine=False)
        self.ada = Linear(dim, 2 * dim, rng.child("ada"), zero=True)
        self.out = Linear(dim, out_dim, rng.child("out"), zero=True)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        b, d = cond.shape
        mod = self.ada(silu(cond)).reshape(b, 2, 1, d)
        return self.out(modulate(self.norm(x), mod[:, 0], mod[:, 1]))


def timestep_features(t: np.ndarray, frequencies: int = 64, max_period: float = 10000.0) -> Tensor:
    """[cos, sin] features of 1000*t at `frequencies` log-spaced frequencies."""
    t = np.asarray(t, dtype=get_default_dtype()).reshape(-1) * 1000.0
    freqs = np.exp(-math.log(max_period) * np.arange(frequencies) / frequencies)
    args = Tensor(t[:, None] * freqs[None, :], dtype=get_default_dtype())
    return concat([cos(args), sin(args)], axis=-1)


class TimestepEmbedder(Module):
    def __init__(self, dim: int, rng: RngStream, frequencies: int = 64):
        self.frequencies = frequencies
        self.fc1 = Linear(2 * frequencies, dim, rng.child("fc1"))
        self.fc2 = Linear(dim, dim, rng.child("fc2"))

    def forward(self, t: np.ndarray) -> Tensor:
        return self.fc2(silu(self.fc1(timestep_features(t, self.frequencies))))


class LabelEmbedder(Module):
    """Class table with one extra row (index == num_classes) for the null label."""

    def __init__(self, num_classes: int, dim: int, rng: RngStream):
        self.num_classes = num_classes
        self.table = param(rng.normal((num_classes + 1, dim)) * 0.02)

    @property
    def null_label(self) -> int:
        return self.num_classes

    def forward(self, labels: np.ndarray) -> Tensor:
        return take_rows(self.table, np.asarray(labels, dtype=np.int64).reshape(-1))
