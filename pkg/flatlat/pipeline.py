"""Command-line pipeline.

  python -m flatlat.pipeline gen-data --seed 0
  python -m flatlat.pipeline train-vae --epochs 30
  python -m flatlat.pipeline train-flow --steps 5000
  python -m flatlat.pipeline sample --count 64
  python -m flatlat.pipeline ablate | analyze | sweep-cfg | sweep-latent
  python -m flatlat.pipeline flops [--exact]
  python -m flatlat.pipeline bench

Every stage reads its inputs from the data root (FLATLAT_DATA_DIR or [run] data_dir)
and writes checkpoints under models/ and reports under reports/<command>/.
Randomness flows from [run] seed through one labeled sub-stream per stage.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import asdict, replace
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from flatlat import analysis, costmodel
from flatlat.config import RunConfig, parse_config
from flatlat.data.fgrd import read_fgrd, write_fgrd
from flatlat.data.synth import GridDataset, build_dataset, read_manifest, write_manifest
from flatlat.errors import ConfigError, FlatLatError, UsageError
from flatlat.flow import (
    EmaState,
    FlowConfig,
    LatentStats,
    VelocityModel,
    default_labels,
    ema_model,
    latents_to_grids,
    sample_latents,
    train_flow,
)
from flatlat.lab.bench import throughput_bench, throughput_ratio
from flatlat.lab.sweeps import sweep_cfg, sweep_latent, token_ordering_holds
from flatlat.nd.optim import AdamWState, WsdSchedule
from flatlat.nd.rng import RngStream
from flatlat.nd.tensor import precision
from flatlat.registry import load_checkpoint, prefixed, save_checkpoint, unprefixed, version_id
from flatlat.reports import Provenance, csv_report, emit_report, heat_table, heatmap_grid, line_chart
from flatlat.validate import check_grids, check_latents
from flatlat.vae import FlatVAE, VaeConfig, baseline_mse, decode_latents, encode_dataset, train_vae

logger = logging.getLogger(__name__)


# -- shared plumbing -------------------------------------------------------------------
def _provenance(cfg: RunConfig) -> Provenance:
    return Provenance(cfg.command_line, cfg.run.seed, cfg.config_hash)


def _rng(cfg: RunConfig, stage: str) -> RngStream:
    return RngStream(cfg.run.seed).child(stage)


def _emit_csv(cfg: RunConfig, name: str, frame: pd.DataFrame) -> None:
    emit_report(csv_report(frame, _provenance(cfg)), cfg.reports_dir / f"{name}.csv")


def load_dataset(cfg: RunConfig) -> tuple[GridDataset, GridDataset, int]:
    d = cfg.dataset_dir
    manifest = read_manifest(d / "manifest.json")
    if not (d / "train.fgrd").exists() or not (d / "val.fgrd").exists():
        raise ConfigError(f"dataset files missing under {d}; run gen-data first")
    train = GridDataset.from_grids(read_fgrd(d / "train.fgrd"))
    val = GridDataset.from_grids(read_fgrd(d / "val.fgrd"))
    for name, split in (("train", train), ("val", val)):
        check_grids(f"{cfg.run.dataset}/{name}", split.features, split.labels, manifest.num_classes)
        split.features = split.features.astype(np.float64)
    return train, val, manifest.num_classes


def load_vae(cfg: RunConfig) -> tuple[FlatVAE, dict, dict]:
    tensors, meta = load_checkpoint("vae", cfg.run.vae_version or None, cfg.root)
    model = FlatVAE(VaeConfig(**meta["config"]), RngStream(0))
    model.load_state_dict(unprefixed(tensors, "model"))
    return model, tensors, meta


def load_flow(cfg: RunConfig, use_ema: bool = True) -> tuple[VelocityModel, LatentStats, FlowConfig, dict]:
    """Velocity model (EMA weights by default), latent stats and the sampling config."""
    tensors, meta = load_checkpoint("flow", cfg.run.flow_version or None, cfg.root)
    arch = meta["architecture"]
    fc = replace(cfg.flow_config(), model_dim=arch["model_dim"], depth=arch["depth"], heads=arch["heads"])
    model = VelocityModel(meta["tokens"], meta["latent_dim"], meta["num_classes"], fc, RngStream(0))
    model.load_state_dict(unprefixed(tensors, "model"))
    if use_ema:
        model = ema_model(model, EmaState(unprefixed(tensors, "ema"), fc.ema_decay))
    stats = LatentStats(tensors["stats.mean"].astype(np.float64), tensors["stats.std"].astype(np.float64))
    return model, stats, fc, meta


# -- commands ----------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig) -> None:
    d = cfg.data
    train, val, manifest = build_dataset(
        d.train_count,
        d.val_count,
        seed=cfg.run.seed,
        encoder_seed=None if d.encoder_seed < 0 else d.encoder_seed,
        params=cfg.synth_params(),
        patch=d.patch,
        window=d.window,
        feature_dim=d.feature_dim,
        standardize=d.standardize,
        n_jobs=d.n_jobs,
    )
    for name, split in (("train", train), ("val", val)):
        check_grids(f"{cfg.run.dataset}/{name}", split.features, split.labels, d.num_classes)
    out = cfg.dataset_dir
    write_fgrd(out / "train.fgrd", train.grids())
    write_fgrd(out / "val.fgrd", val.grids())
    write_manifest(out / "manifest.json", manifest)
    summary = pd.DataFrame([{
        "train": len(train),
        "val": len(val),
        "grid": f"{train.grid_h}x{train.grid_w}",
        "feature_dim": train.feature_dim,
        "baseline_mse": baseline_mse(train, val),
    }])
    _emit_csv(cfg, "dataset", summary)
    logger.info(f"Dataset written to {out}")


def _vae_tensors(model: FlatVAE, last: dict[str, np.ndarray], opt: AdamWState) -> dict[str, np.ndarray]:
    """Best weights under `model.`, last-epoch weights and optimizer moments for resuming."""
    tensors = prefixed(model.state_dict(), "model")
    tensors.update(prefixed(last, "last"))
    tensors.update(prefixed(opt.m, "opt.m"))
    tensors.update(prefixed(opt.v, "opt.v"))
    return tensors


def cmd_train_vae(cfg: RunConfig) -> None:
    train, val, _ = load_dataset(cfg)
    schedule = cfg.schedule()
    model = opt = best_state = None
    start, best_val, best_epoch = 0, float("inf"), 0
    if cfg.vae.resume:
        model, tensors, meta = load_vae(cfg)
        config = model.config
        best_state = model.state_dict()
        best_val, best_epoch = meta["best_val_recon"], meta["best_epoch"]
        last = unprefixed(tensors, "last")
        if last:
            model.load_state_dict(last)
        schedule = WsdSchedule(**meta["schedule"]).with_decay(cfg.vae.extend_stable)
        opt = AdamWState(step=meta["opt_step"], m=unprefixed(tensors, "opt.m"), v=unprefixed(tensors, "opt.v"))
        opt.m = {k: v.astype(np.float64) for k, v in opt.m.items()}
        opt.v = {k: v.astype(np.float64) for k, v in opt.v.items()}
        start = meta["epochs_completed"]
        logger.info(f"Resuming VAE at epoch {start} on a {schedule.total_epochs}-epoch schedule")
    else:
        config = cfg.vae_config(train.grid_h, train.grid_w, train.feature_dim)
    result = train_vae(
        train, val, config, schedule, _rng(cfg, "vae"),
        batch_size=cfg.vae.batch_size,
        epochs=cfg.vae.epochs or None,
        model=model,
        optimizer=opt,
        start_epoch=start,
        best_state=best_state,
        best_val_recon=best_val,
        best_epoch=best_epoch,
    )
    completed = int(result.log["epoch"].iloc[-1])
    meta = {
        "config": asdict(config),
        "schedule": asdict(schedule),
        "best_epoch": result.best_epoch,
        "best_val_recon": result.best_val_recon,
        "baseline_mse": baseline_mse(train, val),
        "epochs_completed": completed,
        "opt_step": result.optimizer.step,
        "seed": cfg.run.seed,
        "dataset": cfg.run.dataset,
    }
    save_checkpoint("vae", version_id(cfg.run.seed, cfg.config_hash), _vae_tensors(result.model, result.last_state, result.optimizer),
                    meta, cfg.root)
    _emit_csv(cfg, "vae_log", result.log)
    chart = line_chart(
        result.log["epoch"], {"train": result.log["train_recon"], "val": result.log["val_recon"]},
        _provenance(cfg), title="VAE reconstruction", xlabel="epoch", ylabel="MSE", logy=True,
    )
    emit_report(chart, cfg.reports_dir / "vae_log.svg")


def cmd_train_flow(cfg: RunConfig) -> None:
    train, _, num_classes = load_dataset(cfg)
    vae, _, vae_meta = load_vae(cfg)
    latents = encode_dataset(vae, train)
    check_latents("vae/train-latents", latents)
    stats = LatentStats.fit(latents)
    fc = cfg.flow_config()
    result = train_flow(stats.standardize(latents), train.labels, num_classes, fc, _rng(cfg, "flow"))
    tensors = prefixed(result.model.state_dict(), "model")
    tensors.update(prefixed(result.ema.shadow, "ema"))
    tensors["stats.mean"] = stats.mean
    tensors["stats.std"] = stats.std
    meta = {
        "tokens": result.model.tokens,
        "latent_dim": result.model.latent_dim,
        "num_classes": num_classes,
        "architecture": {"model_dim": fc.model_dim, "depth": fc.depth, "heads": fc.heads},
        "flow": asdict(fc),
        "vae_config": vae_meta["config"],
        "seed": cfg.run.seed,
    }
    save_checkpoint("flow", version_id(cfg.run.seed, cfg.config_hash), tensors, meta, cfg.root)
    _emit_csv(cfg, "flow_log", result.log)
    chart = line_chart(
        result.log["step"], {"train": result.log["loss"], "ema held-out": result.log["ema_loss"]},
        _provenance(cfg), title="Flow-matching loss", xlabel="step", ylabel="loss",
    )
    emit_report(chart, cfg.reports_dir / "flow_log.svg")


def cmd_sample(cfg: RunConfig) -> None:
    model, stats, fc, _ = load_flow(cfg, cfg.sample.use_ema)
    vae, _, _ = load_vae(cfg)
    labels = default_labels(cfg.sample.count, model.num_classes)
    z = stats.destandardize(sample_latents(model, labels, fc, _rng(cfg, "sample")).z)
    check_latents("samples", z)
    decoded = decode_latents(vae, z)
    c = vae.config
    write_fgrd(cfg.reports_dir / "latents.fgrd", latents_to_grids(z, labels))
    write_fgrd(cfg.reports_dir / "decoded.fgrd", GridDataset(decoded, labels, c.grid_h, c.grid_w).grids())
    rows = pd.DataFrame({"index": np.arange(len(labels)), "label": labels})
    try:
        train, _, k = load_dataset(cfg)
        centroids = analysis.class_centroids(train.features, train.labels, k)
        rows["nearest_centroid"] = analysis.nearest_centroid(decoded, centroids)
        accuracy = float((rows["nearest_centroid"] == rows["label"]).mean())
        logger.info(f"Centroid accuracy of {len(labels)} samples: {accuracy:.3f}")
    except ConfigError as e:
        logger.warning(f"No dataset for centroid check: {e}")
    _emit_csv(cfg, "labels", rows)


def cmd_ablate(cfg: RunConfig) -> None:
    vae, _, _ = load_vae(cfg)
    _, val, _ = load_dataset(cfg)
    features = val.features[: cfg.analysis.samples]
    heat = analysis.ablation_heatmaps(vae, features)
    rows = []
    for i, m in enumerate(heat.maps):
        peak = np.unravel_index(int(np.argmax(m)), m.shape)
        rows.append({
            "token": i,
            "mean_change": float(m.mean()),
            "locality": analysis.locality_score(m),
            "peak_row": int(peak[0]),
            "peak_col": int(peak[1]),
            "split_half": heat.split_half[i],
        })
    _emit_csv(cfg, "ablation", pd.DataFrame(rows))
    emit_report(heatmap_grid(heat.maps, _provenance(cfg), title="Token ablation"), cfg.reports_dir / "ablation.svg")


def cmd_analyze(cfg: RunConfig) -> None:
    a = cfg.analysis
    train, val, k = load_dataset(cfg)
    vae, _, _ = load_vae(cfg)
    c = vae.config
    n = min(a.samples, len(train))
    manifest = read_manifest(cfg.dataset_dir / "manifest.json")
    scaler = manifest.standardizer()
    raw = scaler.invert(train.features[:n]) if scaler else train.features[:n]
    train_z = encode_dataset(vae, train)
    val_z = encode_dataset(vae, val)

    pca_rows = []
    for name, x in (("features", train.features.reshape(-1, train.feature_dim)),
                    ("latents", train_z.reshape(-1, c.latent_dim))):
        rep = analysis.pca_compressibility(x, a.pca_threshold)
        pca_rows.append({"input": name, "dim": x.shape[1], "dims_for_threshold": rep.dims_for_threshold,
                         "threshold": rep.threshold, "compression": rep.compression_ratio})
    _emit_csv(cfg, "pca", pd.DataFrame(pca_rows))

    curve = analysis.spatial_similarity(raw, train.grid_h, train.grid_w)
    sim = pd.DataFrame({"distance": curve.distances, "similarity": curve.similarity, "pairs": curve.counts})
    _emit_csv(cfg, "similarity", sim)
    emit_report(line_chart(curve.distances, {"cosine": curve.similarity}, _provenance(cfg),
                           title="Patch similarity vs distance", xlabel="distance (patches)", ylabel="cosine"),
                cfg.reports_dir / "similarity.svg")

    sweep = analysis.noise_sweep(vae, val.features, a.noise_sigmas, _rng(cfg, "noise"), draws=a.noise_draws)
    _emit_csv(cfg, "noise", pd.DataFrame({"sigma": sweep.sigmas, "mse": sweep.errors}))
    emit_report(line_chart(sweep.sigmas, {"reconstruction": sweep.errors}, _provenance(cfg),
                           title="Latent noise robustness", xlabel="sigma", ylabel="MSE"),
                cfg.reports_dir / "noise.svg")

    knn = []
    for name, tr, va in (("features", train.features, val.features), ("latents", train_z, val_z)):
        rep = analysis.knn_eval(tr, train.labels, va, val.labels, k=min(a.knn_k, len(tr)))
        knn.append({"input": name, "k": rep.k, "accuracy": rep.accuracy})
    _emit_csv(cfg, "knn", pd.DataFrame(knn))
    logger.info(f"Analysis reports written to {cfg.reports_dir} ({k} classes)")


def cmd_sweep_latent(cfg: RunConfig) -> None:
    train, val, _ = load_dataset(cfg)
    base = cfg.vae_config(train.grid_h, train.grid_w, train.feature_dim)
    table = sweep_latent(train, val, base, cfg.schedule(), _rng(cfg, "sweep-latent"), cfg.latent_shapes(),
                         batch_size=cfg.vae.batch_size, epochs=cfg.sweep.epochs or None)
    _emit_csv(cfg, "latent_sweep", table)
    if token_ordering_holds(table):
        logger.info("More tokens reconstruct at least as well at every fixed latent size")
    else:
        logger.warning("Token ordering does not hold at this scale; see latent_sweep.csv")


def cmd_sweep_cfg(cfg: RunConfig) -> None:
    model, stats, fc, _ = load_flow(cfg)
    vae, _, _ = load_vae(cfg)
    train, _, k = load_dataset(cfg)
    centroids = analysis.class_centroids(train.features, train.labels, k)
    s = cfg.sweep
    table = sweep_cfg(model, vae, stats, centroids, fc, _rng(cfg, "sweep-cfg"), s.samples_per_class,
                      s.cfg_weights, s.cfg_starts)
    _emit_csv(cfg, "cfg_sweep", table)
    emit_report(heat_table(table, "cfg_weight", "t_lo", "accuracy", _provenance(cfg), title="Centroid accuracy"),
                cfg.reports_dir / "cfg_sweep.svg")


def cmd_flops(cfg: RunConfig) -> None:
    tables = {
        "flops": costmodel.flops_table(cfg.exact),
        "backward_flops": costmodel.backward_table(cfg.exact),
        "training_flops": costmodel.training_table(cfg.exact),
        "encoding_flops": costmodel.encoding_table(),
    }
    for name, table in tables.items():
        print(f"\n{name}")
        print(table.to_string(index=False))
        _emit_csv(cfg, name, table)
    for family in costmodel.DIT_FAMILIES:
        print(f"{family} forward reduction: {costmodel.forward_reduction(family, cfg.exact)}x")


def cmd_bench(cfg: RunConfig) -> None:
    b = cfg.bench
    table = throughput_bench(b.seq_lens, b.batch_sizes, cfg.flow_config(), trials=b.trials,
                             min_duration=b.duration, seed=cfg.run.seed, n_jobs=b.n_jobs)
    ratio = throughput_ratio(table)
    print(table.to_string(index=False))
    print(ratio.to_string(index=False))
    _emit_csv(cfg, "throughput", table)
    _emit_csv(cfg, "throughput_ratio", ratio)


COMMAND_HANDLERS: dict[str, Callable[[RunConfig], None]] = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train-flow": cmd_train_flow,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "sweep-cfg": cmd_sweep_cfg,
    "sweep-latent": cmd_sweep_latent,
    "flops": cmd_flops,
    "bench": cmd_bench,
}


def dispatch(cfg: RunConfig) -> int:
    """Run one command; map errors to their category's exit code."""
    handler = COMMAND_HANDLERS[cfg.command]
    logger.info(f"Running {cfg.command_line} (seed={cfg.run.seed}, config={cfg.config_hash})")
    try:
        with precision(np.float64 if cfg.run.precision == "float64" else np.float32):
            handler(cfg)
    except FlatLatError as e:
        logger.error(f"{cfg.command} failed with {e.category} error: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"{cfg.command} failed unexpectedly: {e}")
        return 1
    logger.info(f"{cfg.command} completed")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        cfg = parse_config(sys.argv[1:] if argv is None else list(argv))
    except UsageError as e:
        logger.error(f"usage error: {e}")
        return e.exit_code
    if cfg.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())
