"""Run configuration.

Precedence, lowest first: section defaults < INI file (--config) < environment
(FLATLAT_<SECTION>_<KEY>, a .env file is loaded first) < command-line flags.

Example file:
  [run]
  seed = 7
  [flow]
  kappa = 3
  cfg_interval = 0.225, 1.0
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from dotenv import load_dotenv

from flatlat.data.synth import SynthParams
from flatlat.errors import ConfigError, UsageError
from flatlat.flow import FlowConfig
from flatlat.nd.optim import WsdSchedule
from flatlat.registry import config_hash, data_root
from flatlat.vae import VaeConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "FLATLAT_"

COMMANDS = (
    "gen-data",
    "train-vae",
    "train-flow",
    "sample",
    "ablate",
    "analyze",
    "sweep-cfg",
    "sweep-latent",
    "flops",
    "bench",
)


@dataclass
class RunSection:
    seed: int = 0
    precision: str = "float64"
    data_dir: str = ""
    dataset: str = "synth"
    reports: str = ""
    vae_version: str = ""
    flow_version: str = ""


@dataclass
class DataSection:
    train_count: int = 2000
    val_count: int = 200
    num_classes: int = 4
    image_size: int = 32
    amplitude: float = 1.0
    patch: int = 4
    window: int = 6
    feature_dim: int = 16
    encoder_seed: int = -1
    standardize: bool = True
    n_jobs: int = 1


@dataclass
class VaeSection:
    tokens: int = 8
    latent_dim: int = 8
    width: int = 64
    heads: int = 4
    encoder_depth: int = 2
    decoder_depth: int = 2
    extra_registers: int = 0
    beta_ref: float = 1e-6
    dim_ref: int = 512
    batch_size: int = 64
    warmup_epochs: int = 5
    stable_epochs: int = 40
    decay_epochs: int = 5
    warmup_lr: float = 1e-6
    peak_lr: float = 1e-4
    min_lr: float = 1e-8
    epochs: int = 0  # 0 = the whole schedule
    resume: bool = False
    extend_stable: int = 0


@dataclass
class FlowSection:
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


@dataclass
class SampleSection:
    count: int = 64
    use_ema: bool = True


@dataclass
class AnalysisSection:
    samples: int = 256
    pca_threshold: float = 0.95
    noise_sigmas: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.5, 0.7, 1.0)
    noise_draws: int = 4
    knn_k: int = 20


@dataclass
class SweepSection:
    shapes: tuple[int, ...] = (16, 4, 8, 8, 4, 16)  # flattened (tokens, latent_dim) pairs
    epochs: int = 0
    cfg_weights: tuple[float, ...] = (1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0)
    cfg_starts: tuple[float, ...] = (0.0, 0.1, 0.2, 0.225, 0.3, 0.4)
    samples_per_class: int = 16


@dataclass
class BenchSection:
    seq_lens: tuple[int, ...] = (8, 64)
    batch_sizes: tuple[int, ...] = (1, 8, 32)
    trials: int = 5
    duration: float = 0.2
    n_jobs: int = 1


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "vae": VaeSection,
    "flow": FlowSection,
    "sample": SampleSection,
    "analysis": AnalysisSection,
    "sweep": SweepSection,
    "bench": BenchSection,
}


@dataclass
class RunConfig:
    command: str = "flops"
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    vae: VaeSection = field(default_factory=VaeSection)
    flow: FlowSection = field(default_factory=FlowSection)
    sample: SampleSection = field(default_factory=SampleSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    bench: BenchSection = field(default_factory=BenchSection)
    exact: bool = False
    verbose: bool = False
    argv: tuple[str, ...] = ()

    # -- derived paths ----------------------------------------------------------
    @property
    def root(self) -> Path:
        return data_root(Path(self.run.data_dir) if self.run.data_dir else None)

    @property
    def dataset_dir(self) -> Path:
        return self.root / "datasets" / self.run.dataset

    @property
    def reports_dir(self) -> Path:
        base = Path(self.run.reports).resolve() if self.run.reports else self.root / "reports"
        return base / self.command

    # -- typed views ------------------------------------------------------------
    def sections(self) -> dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    @property
    def config_hash(self) -> str:
        return config_hash(self.sections())

    @property
    def command_line(self) -> str:
        return " ".join(("flatlat", self.command) + tuple(self.argv))

    def synth_params(self) -> SynthParams:
        d = self.data
        return SynthParams(num_classes=d.num_classes, image_size=d.image_size, amplitude=d.amplitude)

    def vae_config(self, grid_h: int, grid_w: int, feature_dim: int, tokens: Optional[int] = None,
                   latent_dim: Optional[int] = None) -> VaeConfig:
        v = self.vae
        return VaeConfig(
            grid_h=grid_h,
            grid_w=grid_w,
            feature_dim=feature_dim,
            tokens=v.tokens if tokens is None else tokens,
            latent_dim=v.latent_dim if latent_dim is None else latent_dim,
            width=v.width,
            heads=v.heads,
            encoder_depth=v.encoder_depth,
            decoder_depth=v.decoder_depth,
            extra_registers=v.extra_registers,
            beta_ref=v.beta_ref,
            dim_ref=v.dim_ref,
        )

    def schedule(self) -> WsdSchedule:
        v = self.vae
        return WsdSchedule(v.warmup_epochs, v.stable_epochs, v.decay_epochs, v.warmup_lr, v.peak_lr, v.min_lr)

    def flow_config(self) -> FlowConfig:
        f = self.flow
        return FlowConfig(**{k.name: getattr(f, k.name) for k in fields(FlowConfig)})

    def latent_shapes(self) -> list[tuple[int, int]]:
        s = self.sweep.shapes
        return [(s[i], s[i + 1]) for i in range(0, len(s), 2)]

    def validate(self) -> "RunConfig":
        """Range checks; every failure names its key."""
        if self.command not in COMMANDS:
            raise UsageError("command", f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if self.run.seed < 0:
            raise UsageError("run.seed", f"must be non-negative, got {self.run.seed}")
        if self.run.precision not in ("float64", "float32"):
            raise UsageError("run.precision", f"must be float64 or float32, got {self.run.precision!r}")
        if self.flow.kappa < 1:
            raise UsageError("flow.kappa", f"must be >= 1, got {self.flow.kappa}")
        if self.flow.cfg_weight < 1:
            raise UsageError("flow.cfg_weight", f"must be >= 1, got {self.flow.cfg_weight}")
        lo, hi = self.flow.cfg_interval
        if not 0.0 <= lo < hi <= 1.0:
            raise UsageError("flow.cfg_interval", f"needs 0 <= t_lo < t_hi <= 1, got {self.flow.cfg_interval}")
        if self.vae.tokens > (self.data.image_size // self.data.patch) ** 2:
            raise UsageError("vae.tokens", f"{self.vae.tokens} tokens exceed the patch count of the data grid")
        if len(self.sweep.shapes) % 2 or not self.sweep.shapes:
            raise UsageError("sweep.shapes", "needs (tokens, latent_dim) pairs")
        if self.bench.duration <= 0:
            raise UsageError("bench.duration", f"must be positive, got {self.bench.duration}")
        for name, build in (("flow", self.flow_config), ("vae", self.schedule), ("data", self.synth_params)):
            try:
                build()
            except ConfigError as e:
                raise UsageError(name, str(e)) from e
        return self


# -- value coercion ------------------------------------------------------------------
def _section_types(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(key: str, raw: Any, typ: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if origin is tuple:
            args = typing.get_args(typ)
            item = args[0]
            parts = [p for p in text.replace(",", " ").split() if p]
            values = tuple(item(p) for p in parts)
            if Ellipsis not in args and len(values) != len(args):
                raise ValueError(f"expected {len(args)} values, got {len(values)}")
            return values
    except ValueError as e:
        raise UsageError(key, f"cannot parse {raw!r}: {e}") from e
    raise UsageError(key, f"unsupported type {typ}")


def apply_overrides(config: RunConfig, overrides: Mapping[str, Any], source: str) -> None:
    """Set `section.key` values, rejecting unknown keys."""
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise UsageError(dotted, f"unknown config section in {source}")
        types = _section_types(SECTIONS[section])
        if key not in types:
            raise UsageError(dotted, f"unknown config key in {source}")
        setattr(getattr(config, section), key, _coerce(dotted, raw, types[key]))
        logger.debug(f"{source}: {dotted} = {raw!r}")


def file_overrides(path: Path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise UsageError("--config", f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as e:
        raise UsageError("--config", f"cannot parse {p}: {e}") from e
    return {f"{s}.{k}": v for s in parser.sections() for k, v in parser.items(s)}


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict[str, str]:
    """FLATLAT_<SECTION>_<KEY> variables. FLATLAT_DATA_DIR belongs to the registry and is skipped."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX) or name == "FLATLAT_DATA_DIR":
            continue
        section, _, key = name[len(ENV_PREFIX):].lower().partition("_")
        if section in SECTIONS:
            out[f"{section}.{key}"] = value
    return out


def _set_pairs(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(item, "--set expects section.key=value")
        out[key.strip()] = value
    return out


# -- argument parsing -------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError("argv", message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir", help="Root for datasets, models and reports")
    common.add_argument("--kappa", type=float, help="Time-shift factor")
    common.add_argument("--cfg-weight", type=float, help="Guidance weight")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="flatlat", description="Flat latent compression, flow matching and cost tables")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "flops":
            p.add_argument("--exact", action="store_true", help="Derive every cell from exact integers")
        if name in ("train-vae", "sweep-latent"):
            p.add_argument("--epochs", type=int)
        if name == "train-flow":
            p.add_argument("--steps", type=int)
        if name == "sample":
            p.add_argument("--count", type=int)
    return parser


def parse_config(argv: Sequence[str], environ: Optional[Mapping[str, str]] = None,
                 dotenv: bool = True) -> RunConfig:
    """Defaults < file < environment < flags."""
    args = build_parser().parse_args(list(argv))
    if dotenv and environ is None:
        load_dotenv()
    config = RunConfig(command=args.command, argv=tuple(argv[1:]))
    config.exact = bool(getattr(args, "exact", False))
    config.verbose = bool(args.verbose)

    if args.config is not None:
        apply_overrides(config, file_overrides(args.config), str(args.config))
    apply_overrides(config, env_overrides(environ), "environment")

    flags: dict[str, Any] = {}
    if args.seed is not None:
        flags["run.seed"] = args.seed
    if args.data_dir is not None:
        flags["run.data_dir"] = args.data_dir
    if args.kappa is not None:
        flags["flow.kappa"] = args.kappa
    if args.cfg_weight is not None:
        flags["flow.cfg_weight"] = args.cfg_weight
    if getattr(args, "epochs", None) is not None:
        flags["sweep.epochs" if args.command == "sweep-latent" else "vae.epochs"] = args.epochs
    if getattr(args, "steps", None) is not None:
        flags["flow.train_steps"] = args.steps
    if getattr(args, "count", None) is not None:
        flags["sample.count"] = args.count
    flags.update(_set_pairs(args.set))
    apply_overrides(config, flags, "command line")
    return config.validate()
