"""Checkpoint registry (local filesystem) and the FDCK tensor-file codec.

Layout:
  data/models/<model_id>/<version>/{model.fdck,meta.json}
  data/models/<model_id>/LATEST  (text file with version id)
  data/datasets/<name>/{train.fgrd,val.fgrd,manifest.json}
  data/reports/<command>/...

`model_id` examples:
  vae
  flow

FDCK layout (little-endian):
  b"FDCK" | u32 version=1 | u32 count
  then per tensor: u32 name_len | name (utf-8) | u32 rank | rank * u32 dims | float32 data
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from flatlat.errors import ConfigError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"FDCK"
VERSION = 1
_HEADER = struct.Struct("<4s2I")
_U32 = struct.Struct("<I")
CHECKPOINT_FILE = "model.fdck"


def data_root(override: Optional[Path] = None) -> Path:
    if override is not None:
        return Path(override).resolve()
    return Path(os.getenv("FLATLAT_DATA_DIR", "data")).resolve()


def models_root(root: Optional[Path] = None) -> Path:
    return data_root(root) / "models"


def reports_root(root: Optional[Path] = None) -> Path:
    return data_root(root) / "reports"


def datasets_root(root: Optional[Path] = None) -> Path:
    return data_root(root) / "datasets"


def config_hash(payload: Mapping[str, Any]) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def version_id(seed: int, cfg_hash: str) -> str:
    """Version ids derive from the run, so a rerun lands in the same directory."""
    return f"s{seed}-{cfg_hash}"


def model_root(model_id: str, root: Optional[Path] = None) -> Path:
    return models_root(root) / model_id


def model_version_dir(model_id: str, version: str, root: Optional[Path] = None) -> Path:
    return model_root(model_id, root) / version


def write_latest(model_id: str, version: str, root: Optional[Path] = None) -> None:
    p = model_root(model_id, root)
    p.mkdir(parents=True, exist_ok=True)
    (p / "LATEST").write_text(version, encoding="utf-8")


def read_latest(model_id: str, root: Optional[Path] = None) -> Optional[str]:
    p = model_root(model_id, root) / "LATEST"
    if not p.exists():
        return None
    return p.read_text(encoding="utf-8").strip() or None


def latest_dir(model_id: str, root: Optional[Path] = None) -> Optional[Path]:
    v = read_latest(model_id, root)
    if not v:
        return None
    d = model_version_dir(model_id, v, root)
    return d if d.exists() else None


def save_meta(model_dir: Path, meta: dict[str, Any]) -> None:
    (model_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_meta(model_dir: Path) -> dict[str, Any]:
    p = model_dir / "meta.json"
    return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}


# -- FDCK codec ----------------------------------------------------------------
def encode_fdck(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def _need(buf: bytes, offset: int, size: int, what: str) -> None:
    if offset + size > len(buf):
        raise FormatError(f"truncated FDCK {what}", offset)


def decode_fdck(buf: bytes) -> dict[str, np.ndarray]:
    """Tensors in file order, as float32 arrays."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad FDCK magic", 0)
    _need(buf, 0, _HEADER.size, "header")
    _, version, count = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise FormatError(f"unsupported FDCK version {version}", 4)
    offset = _HEADER.size
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        _need(buf, offset, 4, "name length")
        (name_len,) = _U32.unpack_from(buf, offset)
        offset += 4
        _need(buf, offset, name_len, "name")
        try:
            name = buf[offset : offset + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError("tensor name is not utf-8", offset) from e
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}", offset)
        offset += name_len
        _need(buf, offset, 4, "rank")
        (rank,) = _U32.unpack_from(buf, offset)
        offset += 4
        _need(buf, offset, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        _need(buf, offset, 4 * n, f"data for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(dims).astype(np.float32)
        offset += 4 * n
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after {count} FDCK tensors", offset)
    return out


def write_fdck(path: Path, tensors: Mapping[str, np.ndarray]) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_fdck(tensors)
    tmp = p.with_name(p.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, p)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_fdck(path: Path) -> dict[str, np.ndarray]:
    return decode_fdck(Path(path).read_bytes())


# -- checkpoints -----------------------------------------------------------------
def save_checkpoint(
    model_id: str,
    version: str,
    tensors: Mapping[str, np.ndarray],
    meta: dict[str, Any],
    root: Optional[Path] = None,
) -> Path:
    d = model_version_dir(model_id, version, root)
    d.mkdir(parents=True, exist_ok=True)
    write_fdck(d / CHECKPOINT_FILE, tensors)
    save_meta(d, meta)
    write_latest(model_id, version, root)
    logger.info(f"Saved {model_id} checkpoint {version} ({len(tensors)} tensors) to {d}")
    return d


def load_checkpoint(
    model_id: str,
    version: Optional[str] = None,
    root: Optional[Path] = None,
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Tensors and meta of a version (default LATEST). Missing checkpoints are a config error."""
    d = model_version_dir(model_id, version, root) if version else latest_dir(model_id, root)
    if d is None or not (d / CHECKPOINT_FILE).exists():
        where = version or "LATEST"
        raise ConfigError(f"no {model_id} checkpoint ({where}) under {models_root(root)}; train one first")
    return read_fdck(d / CHECKPOINT_FILE), load_meta(d)


def prefixed(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in tensors.items()}


def unprefixed(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    head = prefix + "."
    return {k[len(head):]: v for k, v in tensors.items() if k.startswith(head)}
