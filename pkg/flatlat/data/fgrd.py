"""FGRD: little-endian binary container for same-shaped feature grids.

Layout:
  b"FGRD" | u32 version=1 | u32 count | u32 Ph | u32 Pw | u32 D
  then per grid: u32 class_id | Ph*Pw*D float32
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from flatlat.data.synth import FeatureGrid
from flatlat.errors import DimensionError, FormatError

MAGIC = b"FGRD"
VERSION = 1
_HEADER = struct.Struct("<4s5I")


def encode_fgrd(grids: Sequence[FeatureGrid]) -> bytes:
    if grids:
        g0 = grids[0]
        shape = (g0.grid_h, g0.grid_w, g0.feature_dim)
        for g in grids:
            if (g.grid_h, g.grid_w, g.feature_dim) != shape:
                raise DimensionError(f"grid shape {(g.grid_h, g.grid_w, g.feature_dim)} differs from {shape}")
    else:
        shape = (0, 0, 0)
    parts = [_HEADER.pack(MAGIC, VERSION, len(grids), *shape)]
    for g in grids:
        parts.append(struct.pack("<I", g.class_id))
        parts.append(np.ascontiguousarray(g.features, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_fgrd(buf: bytes) -> list[FeatureGrid]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad FGRD magic", 0)
    if len(buf) < _HEADER.size:
        raise FormatError("truncated FGRD header", len(buf))
    _, version, count, gh, gw, dim = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported FGRD version {version}", 4)
    n_floats = gh * gw * dim
    record = 4 + 4 * n_floats
    offset = _HEADER.size
    grids = []
    for i in range(count):
        if offset + record > len(buf):
            raise FormatError(f"truncated FGRD record {i} of {count}", offset)
        (class_id,) = struct.unpack_from("<I", buf, offset)
        data = np.frombuffer(buf, dtype="<f4", count=n_floats, offset=offset + 4)
        grids.append(FeatureGrid(gh, gw, data.reshape(gh * gw, dim).astype(np.float32), int(class_id)))
        offset += record
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after {count} FGRD records", offset)
    return grids


def write_fgrd(path: Path, grids: Sequence[FeatureGrid]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_fgrd(grids)
    tmp = p.with_name(p.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, p)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_fgrd(path: Path) -> list[FeatureGrid]:
    return decode_fgrd(Path(path).read_bytes())
