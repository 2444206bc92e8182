"""Synthetic feature grids and their on-disk format."""

from flatlat.data.fgrd import read_fgrd, write_fgrd
from flatlat.data.synth import (
    FeatureGrid,
    FrozenEncoder,
    GridDataset,
    SynthParams,
    build_dataset,
    frozen_encode,
    generate_image,
)

__all__ = [
    "FeatureGrid",
    "FrozenEncoder",
    "GridDataset",
    "SynthParams",
    "build_dataset",
    "frozen_encode",
    "generate_image",
    "read_fgrd",
    "write_fgrd",
]
