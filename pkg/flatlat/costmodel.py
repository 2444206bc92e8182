"""Analytic transformer FLOPs, counting one multiply-add as one FLOP.

Per layer with a parameter-matched SwiGLU (H = 8D/3):
  attention projections 4BSD^2, scores and weighted values 2BS^2D,
  FFN 3 * BSD * 8D/3 = 8BSD^2, so FLOPs = 12BSD^2 + 2BS^2D.
Layer norms, adaLN and embeddings are not counted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from fractions import Fraction
from typing import Optional, Sequence

import pandas as pd

from flatlat.errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

INT64_MAX = 2**63 - 1
GIGA = 10**9


@dataclass(frozen=True)
class LayerSpec:
    seq_len: int
    hidden_dim: int
    batch: int = 1

    def __post_init__(self):
        if self.seq_len < 0 or self.hidden_dim < 1 or self.batch < 1:
            raise ConfigError(f"invalid layer spec {self}")


@dataclass(frozen=True)
class CostBreakdown:
    linear_flops: int = 0
    attention_flops: int = 0

    @property
    def total_flops(self) -> int:
        return self.linear_flops + self.attention_flops

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(self.linear_flops + other.linear_flops, self.attention_flops + other.attention_flops)

    def scaled(self, n: int) -> "CostBreakdown":
        return CostBreakdown(self.linear_flops * n, self.attention_flops * n)

    @property
    def attention_share(self) -> Fraction:
        return Fraction(self.attention_flops, self.total_flops) if self.total_flops else Fraction(0)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[tuple[LayerSpec, int], ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError(f"model {self.name} has no layers")
        if any(count < 0 for _, count in self.layers):
            raise ConfigError(f"model {self.name} has a negative layer count")

    @property
    def depth(self) -> int:
        return sum(count for _, count in self.layers)


@dataclass(frozen=True)
class TrainingCost:
    encoding_flops: int
    dit_forward: int
    dit_backward: int

    @property
    def dit_train(self) -> int:
        return self.dit_forward + self.dit_backward

    @property
    def total(self) -> int:
        return self.encoding_flops + self.dit_train


def _checked(value: Fraction, what: str) -> int:
    if value.denominator != 1:
        raise NumericError(f"{what} is not integral: {value}")
    if value > INT64_MAX:
        raise NumericError(f"{what} = {value} overflows a 64-bit integer")
    return int(value)


def swiglu_flops(spec: LayerSpec) -> Fraction:
    b, s, d = spec.batch, spec.seq_len, spec.hidden_dim
    return 3 * b * s * d * Fraction(8 * d, 3)


def layer_flops(spec: LayerSpec) -> CostBreakdown:
    b, s, d = spec.batch, spec.seq_len, spec.hidden_dim
    linear = Fraction(4 * b * s * d * d) + swiglu_flops(spec)
    attention = Fraction(2 * b * s * s * d)
    _checked(linear + attention, "layer FLOPs")
    return CostBreakdown(_checked(linear, "linear FLOPs"), _checked(attention, "attention FLOPs"))


def model_flops(spec: ModelSpec) -> CostBreakdown:
    total = CostBreakdown()
    for layer, count in spec.layers:
        total = total + layer_flops(layer).scaled(count)
    if total.total_flops > INT64_MAX:
        raise NumericError(f"{spec.name} FLOPs overflow a 64-bit integer")
    return total


def encoding_flops(*encoders: ModelSpec) -> int:
    return sum(model_flops(e).total_flops for e in encoders)


def training_flops(dit: ModelSpec, encoders: Sequence[ModelSpec] = ()) -> TrainingCost:
    """Encoder forward passes + DiT forward + backward, with backward taken as 2x forward."""
    fwd = model_flops(dit).total_flops
    return TrainingCost(encoding_flops(*encoders), fwd, 2 * fwd)


def reduction(baseline: TrainingCost, candidate: TrainingCost) -> Fraction:
    if candidate.total == 0:
        raise NumericError("reduction against a zero-cost candidate")
    return Fraction(baseline.total, candidate.total)


# -- presets ---------------------------------------------------------------------
def transformer(name: str, seq_len: int, hidden_dim: int, depth: int,
                head: Optional[tuple[int, int]] = None) -> ModelSpec:
    """`head` = (hidden_dim, depth) of extra layers, as in a decoupled-head DiT."""
    layers = [(LayerSpec(seq_len, hidden_dim), depth)]
    if head is not None:
        layers.append((LayerSpec(seq_len, head[0]), head[1]))
    return ModelSpec(name, tuple(layers))


GRID_TOKENS = 256
FLAT_TOKENS = 32

DIT_FAMILIES = {
    "DiT-L": (1024, 24, None),
    "DiT-XL": (1152, 28, None),
    "DiT^DH-XL": (1152, 28, (2048, 2)),
}
LATENTS = {"grid": GRID_TOKENS, "flat": FLAT_TOKENS}

BACKBONE = transformer("backbone ViT-B", GRID_TOKENS + 1 + 4, 768, 12)
FLAT_ENCODER = transformer("compressing encoder ViT-B", GRID_TOKENS + FLAT_TOKENS, 768, 12)
ENCODERS = {"grid": (BACKBONE,), "flat": (BACKBONE, FLAT_ENCODER)}


def dit(family: str, latent: str) -> ModelSpec:
    if family not in DIT_FAMILIES:
        raise ConfigError(f"unknown DiT family {family!r}; choose from {sorted(DIT_FAMILIES)}")
    if latent not in LATENTS:
        raise ConfigError(f"unknown latent {latent!r}; choose from {sorted(LATENTS)}")
    d, depth, head = DIT_FAMILIES[family]
    return transformer(f"{family} {latent}", LATENTS[latent], d, depth, head)


# -- formatting ------------------------------------------------------------------
def quantize(value: Fraction, places: int) -> Decimal:
    """Round-half-even decimal of an exact rational."""
    exact = Decimal(value.numerator) / Decimal(value.denominator)
    return exact.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_EVEN)


def gflops(flops: int, places: int = 1) -> Decimal:
    return quantize(Fraction(flops, GIGA), places)


def layer_cell(flops: int) -> str:
    """Per-layer cell: two decimals, three for values below 0.01 GFLOPs."""
    places = 3 if Fraction(flops, GIGA) < Fraction(1, 100) else 2
    return str(gflops(flops, places))


def flops_table(exact: bool = False) -> pd.DataFrame:
    """Forward FLOPs per sample for every DiT family on both latent layouts."""
    rows = []
    for family in DIT_FAMILIES:
        for latent in LATENTS:
            spec = dit(family, latent)
            per_layer = [layer_flops(layer) for layer, _ in spec.layers]
            rows.append({
                "model": family,
                "latent": latent,
                "S": spec.layers[0][0].seq_len,
                "D": "/".join(str(layer.hidden_dim) for layer, _ in spec.layers),
                "linear": "/".join(layer_cell(c.linear_flops) for c in per_layer),
                "attention": "/".join(layer_cell(c.attention_flops) for c in per_layer),
                "total": str(gflops(model_flops(spec).total_flops) if exact else displayed_forward(spec)),
                "total_flops": model_flops(spec).total_flops,
            })
    return pd.DataFrame(rows)


def _rounded(flops: int) -> Decimal:
    return gflops(flops, 1)


def displayed_forward(spec: ModelSpec) -> Decimal:
    """Forward GFLOPs as a sum of per-stack totals, each rounded to one decimal."""
    return sum((_rounded(layer_flops(layer).scaled(count).total_flops) for layer, count in spec.layers), Decimal(0))


def backward_table(exact: bool = False) -> pd.DataFrame:
    """Forward / backward / total DiT FLOPs per training step.

    Without `exact`, derived cells are built from the displayed (rounded) forward
    value, as published tables usually are.
    """
    rows = []
    for family in DIT_FAMILIES:
        for latent in LATENTS:
            spec = dit(family, latent)
            cost = training_flops(spec)
            if exact:
                fwd, bwd, tot = (gflops(v) for v in (cost.dit_forward, cost.dit_backward, cost.dit_train))
            else:
                fwd = displayed_forward(spec)
                bwd, tot = 2 * fwd, 3 * fwd
            rows.append({"model": family, "latent": latent, "forward": str(fwd), "backward": str(bwd), "total": str(tot)})
    return pd.DataFrame(rows)


def training_table(exact: bool = False) -> pd.DataFrame:
    """Encoding + DiT training FLOPs per step and the reduction of the flat layout."""
    rows = []
    for family in DIT_FAMILIES:
        costs = {latent: training_flops(dit(family, latent), ENCODERS[latent]) for latent in LATENTS}
        if exact:
            cells = {k: (gflops(c.encoding_flops), gflops(c.dit_train), gflops(c.total)) for k, c in costs.items()}
            ratio = reduction(costs["grid"], costs["flat"])
            red = quantize(ratio, 1)
        else:
            cells = {}
            for latent, c in costs.items():
                enc = sum((_rounded(model_flops(e).total_flops) for e in ENCODERS[latent]), Decimal(0))
                train = 3 * displayed_forward(dit(family, latent))
                cells[latent] = (enc, train, enc + train)
            red = (cells["grid"][2] / cells["flat"][2]).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN)
        for latent in LATENTS:
            enc, train, total = cells[latent]
            rows.append({
                "model": family,
                "latent": latent,
                "encoding": str(enc),
                "dit_train": str(train),
                "total": str(total),
                "reduction": f"{red}x" if latent == "flat" else "",
            })
    return pd.DataFrame(rows)


def forward_reduction(family: str, exact: bool = False) -> Decimal:
    """Forward-FLOPs ratio grid/flat layout, to three significant figures."""
    grid, flat = dit(family, "grid"), dit(family, "flat")
    if exact:
        return quantize(Fraction(model_flops(grid).total_flops, model_flops(flat).total_flops), 2)
    return (displayed_forward(grid) / displayed_forward(flat)).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)


def encoding_table() -> pd.DataFrame:
    return pd.DataFrame([
        {"encoder": e.name, "S": e.layers[0][0].seq_len, "D": e.layers[0][0].hidden_dim,
         "L": e.depth, "gflops": str(gflops(model_flops(e).total_flops))}
        for e in (BACKBONE, FLAT_ENCODER)
    ])
