"""CSV and SVG report artifacts with a provenance header.

Every report starts with the command line, seed and config hash that produced it,
so a run can be repeated from the artifact alone. Nothing time-dependent is written.
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from flatlat.errors import ContractError, OutputError  # noqa: E402

logger = logging.getLogger(__name__)

KINDS = ("csv", "svg")


@dataclass(frozen=True)
class Provenance:
    command: str
    seed: int
    config_hash: str

    def lines(self) -> list[str]:
        return [f"command: {self.command}", f"seed: {self.seed}", f"config_hash: {self.config_hash}"]


@dataclass(frozen=True)
class Report:
    kind: str
    payload: bytes
    provenance: Provenance

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"report kind must be one of {KINDS}, got {self.kind!r}")


# -- CSV -------------------------------------------------------------------------
def csv_report(frame: pd.DataFrame, provenance: Provenance) -> Report:
    head = "".join(f"# {line}\n" for line in provenance.lines())
    return Report("csv", (head + frame.to_csv(index=False)).encode("utf-8"), provenance)


def parse_csv_report(payload: bytes) -> tuple[pd.DataFrame, dict[str, str]]:
    """Table and provenance fields of a CSV report."""
    text = payload.decode("utf-8")
    meta: dict[str, str] = {}
    body = []
    for line in text.splitlines(keepends=True):
        if not body and line.startswith("# "):
            key, _, value = line[2:].rstrip("\n").partition(": ")
            meta[key] = value
        else:
            body.append(line)
    return pd.read_csv(io.StringIO("".join(body))), meta


def read_csv_report(path: Path) -> tuple[pd.DataFrame, dict[str, str]]:
    return parse_csv_report(Path(path).read_bytes())


# -- SVG -------------------------------------------------------------------------
def _svg(fig: Figure, provenance: Provenance) -> Report:
    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": f"flatlat-{provenance.seed}", "svg.fonttype": "path"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    text = buf.getvalue().decode("utf-8")
    comment = "<!-- " + " | ".join(line.replace("--", "- -") for line in provenance.lines()) + " -->\n"
    decl_end = text.find("?>") + 2 if text.startswith("<?xml") else 0
    text = text[:decl_end] + "\n" + comment + text[decl_end:].lstrip("\n")
    return Report("svg", text.encode("utf-8"), provenance)


def line_chart(
    x: Sequence[float],
    series: Mapping[str, Sequence[float]],
    provenance: Provenance,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    logy: bool = False,
) -> Report:
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    for label, y in series.items():
        ax.plot(np.asarray(x), np.asarray(y), marker="o", ms=3, label=label)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend(fontsize=8)
    fig.tight_layout()
    return _svg(fig, provenance)


def heatmap_grid(maps: np.ndarray, provenance: Provenance, title: str = "", labels: Optional[Sequence[str]] = None) -> Report:
    """One panel per map, sharing a color scale."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or len(maps) == 0:
        raise ContractError(f"heatmap_grid needs [K, H, W] maps, got {maps.shape}")
    k = len(maps)
    cols = min(k, 4)
    rows = -(-k // cols)
    fig = Figure(figsize=(2.2 * cols + 1.0, 2.2 * rows + 0.6))
    axes = fig.subplots(rows, cols, squeeze=False)
    vmax = float(maps.max()) or 1.0
    im = None
    for i, ax in enumerate(axes.ravel()):
        ax.set_xticks([])
        ax.set_yticks([])
        if i >= k:
            ax.set_axis_off()
            continue
        im = ax.imshow(maps[i], cmap="viridis", vmin=0.0, vmax=vmax)
        ax.set_title(labels[i] if labels else f"token {i}", fontsize=8)
    fig.suptitle(title)
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.8)
    return _svg(fig, provenance)


def heat_table(frame: pd.DataFrame, row: str, col: str, value: str, provenance: Provenance, title: str = "") -> Report:
    """Annotated heat table of `value` over a (row, col) grid."""
    wide = frame.pivot(index=row, columns=col, values=value)
    fig = Figure(figsize=(1.0 + 0.9 * wide.shape[1], 1.0 + 0.5 * wide.shape[0]))
    ax = fig.add_subplot()
    im = ax.imshow(wide.to_numpy(dtype=np.float64), cmap="magma", aspect="auto")
    ax.set_xticks(range(wide.shape[1]), [f"{c:g}" for c in wide.columns])
    ax.set_yticks(range(wide.shape[0]), [f"{r:g}" for r in wide.index])
    ax.set_xlabel(col)
    ax.set_ylabel(row)
    for i in range(wide.shape[0]):
        for j in range(wide.shape[1]):
            ax.text(j, i, f"{wide.iat[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label=value)
    fig.tight_layout()
    return _svg(fig, provenance)


def emit_report(report: Report, path: Path) -> Path:
    """Write atomically: temp file in the target directory, then rename."""
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(report.payload)
        os.replace(tmp, p)
    except OSError as e:
        tmp.unlink(missing_ok=True)
        raise OutputError(p, e) from e
    logger.info(f"Wrote {report.kind} report {p}")
    return p
