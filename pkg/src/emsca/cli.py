"""Command-line pipeline: gen | preprocess | train | select | snr | tvla
| cema | attack | report.

Every subcommand writes its outputs plus the fully resolved config and a
machine-readable summary.json under --out. Exit codes: 0 success, 2
configuration/validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attack as attack_mod
from . import fileio, leakage, mlp, preprocess, selection, simulate
from .config import ConfigError, RunConfig, load_config
from .core import TraceSet

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.override_seed(args.seed)
    return cfg


def _emit(out_dir: Path, cfg: RunConfig, summary: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_text(out_dir / "resolved_config.json", cfg.to_json())
    fileio.write_json(out_dir / "summary.json", summary)


def _key_mode(cfg: RunConfig) -> simulate.KeyMode:
    if cfg.campaign.key_mode == "fixed":
        return simulate.FixedKey(cfg.campaign.key_byte)
    if cfg.campaign.key_mode == "random":
        return simulate.RandomPerDevice()
    raise ConfigError(f"campaign.key_mode: unknown value {cfg.campaign.key_mode!r}")


def cmd_gen(args) -> int:
    cfg = _resolve_config(args)
    gen = cfg.generator.to_generator_config()
    camp = cfg.campaign
    label_kind = camp.label_kind_enum()
    location = tuple(camp.location) if camp.location else None

    if camp.mode == "profiling":
        sets = simulate.gen_campaign(gen, camp.n_devices, camp.traces_per_device,
                                     _key_mode(cfg), camp.repeats_per_input,
                                     label_kind, location)
        trace_set = TraceSet.concatenate([sets[d] for d in sorted(sets)])
    elif camp.mode == "fixed":
        trace_set = simulate.gen_fixed_input_set(
            gen, camp.device_id, camp.fixed_plaintext, camp.key_byte,
            camp.traces_per_device, location)
    elif camp.mode == "scan":
        cells = simulate.gen_grid_scan(gen, camp.device_id, camp.key_byte,
                                       camp.traces_per_device,
                                       camp.repeats_per_input, label_kind)
        trace_set = TraceSet.concatenate([cells[c] for c in sorted(cells)])
    else:
        raise ConfigError(f"campaign.mode: unknown value {camp.mode!r}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_traces(out / "traces.emt", trace_set)
    _emit(out, cfg, {
        "command": "gen",
        "mode": camp.mode,
        "n_traces": len(trace_set),
        "trace_length": trace_set.trace_length,
        "devices": np.unique(trace_set.device_ids).tolist(),
        "label_kind": camp.label_kind,
    })
    return EXIT_OK


def _load_and_average(path: str, averaging_n: int) -> tuple[TraceSet, int]:
    trace_set = fileio.read_traces(path)
    current = np.unique(trace_set.n_averaged)
    if current.size == 1 and int(current[0]) == averaging_n:
        return trace_set, 0
    return preprocess.average_traces(trace_set, averaging_n)


def cmd_preprocess(args) -> int:
    cfg = _resolve_config(args)
    tr = cfg.transform
    averaged, dropped = _load_and_average(args.traces, tr.averaging_n)
    transform = preprocess.FeatureTransform(
        kind=preprocess.TransformKind(tr.kind),
        n_components=tr.n_components,
        window_len=tr.window_len,
        hop=tr.hop,
    ).fit(averaged)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_transform(out / "transform.emf", transform)
    _emit(out, cfg, {
        "command": "preprocess",
        "kind": tr.kind,
        "input_traces": len(averaged),
        "dropped_incomplete_groups": dropped,
        "output_dim": transform.output_dim,
        "dropped_features": transform.standardizer.dropped.tolist(),
        "fingerprint": transform.fingerprint(),
    })
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    transform = fileio.load_transform(args.transform)
    averaged, _ = _load_and_average(args.traces, transform.averaging_n)
    features = transform.apply(averaged)
    labels = averaged.labels().astype(np.int64)

    t = cfg.training
    train_idx, val_idx = mlp.stratified_split(labels, t.validation_fraction, t.seed)
    if val_idx.size == 0:
        raise ConfigError("training.validation_fraction leaves no validation traces")
    model = mlp.init_model(features.shape[1], seed=t.seed,
                           hidden_dims=tuple(t.hidden_dims),
                           dropout_rates=tuple(t.dropout_rates))
    model.transform_fingerprint = transform.fingerprint()
    train_cfg = mlp.TrainConfig(
        lr0=t.lr0, plateau_patience=t.plateau_patience, lr_factor=t.lr_factor,
        batch_size=t.batch_size, max_epochs=t.max_epochs, beta1=t.beta1,
        beta2=t.beta2, adam_eps=t.adam_eps,
        early_stop_patience=t.early_stop_patience, seed=t.seed)
    model, history = mlp.train(model, features[train_idx], labels[train_idx],
                               features[val_idx], labels[val_idx], train_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_model(out / "model.emm", model)
    fileio.write_json(out / "history.json", {
        "train_loss": history.train_loss,
        "train_accuracy": history.train_accuracy,
        "val_accuracy": history.val_accuracy,
        "learning_rate": history.learning_rate,
    })
    _emit(out, cfg, {
        "command": "train",
        "epochs_run": len(history),
        "best_val_accuracy": max(history.val_accuracy),
        "final_lr": history.learning_rate[-1],
        "n_train": int(train_idx.size),
        "n_val": int(val_idx.size),
        "transform_fingerprint": transform.fingerprint(),
    })
    return EXIT_OK


def cmd_select(args) -> int:
    cfg = _resolve_config(args)
    trace_set = fileio.read_traces(args.traces)
    per_device = trace_set.split_by_device()
    pois = selection.find_pois(trace_set, min_separation=cfg.selection.min_separation)
    means = selection.device_means(per_device, pois)
    result = selection.select_devices(
        means, cfg.selection.n_select,
        selection.SelectionMode(cfg.selection.mode), seed=cfg.selection.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_text(out / "selection.json", result.to_json() + "\n")
    _emit(out, cfg, {
        "command": "select",
        "pois": [pois.t1, pois.t2],
        "selected_devices": result.device_ids,
        "mode": cfg.selection.mode,
        "device_means": {str(d): means[d].tolist() for d in sorted(means)},
    })
    return EXIT_OK


def cmd_snr(args) -> int:
    cfg = _resolve_config(args)
    trace_set = fileio.read_traces(args.traces)
    class_fn = (leakage.ClassFn.BYTE_CLASS if cfg.snr.class_fn == "byte"
                else leakage.ClassFn.HW_CLASS)
    est = leakage.snr(trace_set, class_fn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_text(
        out / "snr_per_sample.csv",
        "\n".join("%.9g" % v for v in est.snr_linear) + "\n")
    _emit(out, cfg, {
        "command": "snr",
        "class_fn": cfg.snr.class_fn,
        "top_poi": est.top_poi,
        "snr_db": est.snr_db,
        "n_traces": len(trace_set),
    })
    return EXIT_OK


def cmd_tvla(args) -> int:
    cfg = _resolve_config(args)
    fixed = fileio.read_traces(args.fixed)
    random = fileio.read_traces(args.random)
    result = leakage.tvla(fixed, random)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.atomic_write_text(
        out / "t_values.csv", "\n".join("%.9g" % v for v in result.t_values) + "\n")
    _emit(out, cfg, {
        "command": "tvla",
        "max_abs_t": result.max_abs_t,
        "threshold": result.threshold,
        "leak_detected": result.leak_detected,
        "n_fixed": len(fixed),
        "n_random": len(random),
    })
    return EXIT_OK


def cmd_cema(args) -> int:
    cfg = _resolve_config(args)
    trace_set = fileio.read_traces(args.traces)
    result = leakage.cema(trace_set, schedule=tuple(cfg.cema.schedule))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _emit(out, cfg, {
        "command": "cema",
        "best_guess": result.best_guess,
        "true_key": result.true_key,
        "recovered": result.best_guess == result.true_key,
        "mtd": result.mtd,
        "schedule": list(result.schedule),
        "true_key_ranks": list(result.ranks),
    })
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _resolve_config(args)
    transform = fileio.load_transform(args.transform)
    model = fileio.load_model(args.model)
    averaged, _ = _load_and_average(args.traces, transform.averaging_n)
    cells = averaged.split_by_location()
    result = attack_mod.scan_attack(
        model, transform, cells,
        grid_size=cfg.generator.grid_size,
        r_min=cfg.attack.r_min,
        confidence_queries=cfg.attack.confidence_queries,
        max_traces=cfg.attack.max_traces,
        blind=cfg.attack.blind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if result.accuracy is not None:
        fileio.heatmap_to_csv(out / "accuracy_heatmap.csv", result.accuracy)
        fileio.heatmap_to_pgm(out / "accuracy_heatmap.pgm", result.accuracy)
    fileio.heatmap_to_csv(out / "confidence_heatmap.csv", result.confidence)
    fileio.heatmap_to_pgm(out / "confidence_heatmap.pgm", result.confidence)
    fileio.atomic_write_text(out / "attack_report.json",
                             result.report.to_json() + "\n")
    _emit(out, cfg, {
        "command": "attack",
        "best_cell": list(result.best_cell),
        "predicted_key": result.report.predicted_key,
        "verdict": result.report.verdict.value,
        "confidence_ratio": result.report.confidence_ratio,
        "queries_used": result.queries_used,
        "cells_scanned": result.confidence.metadata["cells_scanned"],
    })
    return EXIT_OK


def cmd_report(args) -> int:
    """Consolidate a run directory: render heatmap CSVs, gather summaries."""
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"{run_dir}: not a directory")
    out = Path(args.out) if args.out else run_dir
    combined: dict = {"run_dir": str(run_dir), "summaries": {}}
    for summary in sorted(run_dir.glob("**/summary.json")):
        import json as _json
        combined["summaries"][str(summary.parent.relative_to(run_dir))] = (
            _json.loads(summary.read_text()))
    for csv_path in sorted(run_dir.glob("**/*_heatmap.csv")):
        rows = [[float(v) for v in line.split(",")]
                for line in csv_path.read_text().splitlines()]
        values = np.array(rows)
        hm = leakage.Heatmap(values=values, metric=leakage.MetricKind.T_MAX,
                             complete=bool(np.all(np.isfinite(values))))
        fileio.heatmap_to_pgm(out / (csv_path.stem + ".pgm"), hm)
    fileio.write_json(out / "report.json", combined)
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emsca",
        description="Simulated-EM side-channel analysis pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, traces=False):
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, help="override every config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS/worker threads")
        if traces:
            p.add_argument("--traces", required=True, help="input trace file")

    p = sub.add_parser("gen", help="generate synthetic traces")
    common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("preprocess", help="fit a feature transform")
    common(p, traces=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the classifier")
    common(p, traces=True)
    p.add_argument("--transform", required=True, help="fitted transform blob")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("select", help="pick training devices")
    common(p, traces=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("snr", help="side-channel SNR of a trace set")
    common(p, traces=True)
    p.set_defaults(func=cmd_snr)

    p = sub.add_parser("tvla", help="fixed-vs-random Welch t-test")
    common(p)
    p.add_argument("--fixed", required=True, help="fixed-input trace file")
    p.add_argument("--random", required=True, help="random-input trace file")
    p.set_defaults(func=cmd_tvla)

    p = sub.add_parser("cema", help="correlation analysis with MTD")
    common(p, traces=True)
    p.set_defaults(func=cmd_cema)

    p = sub.add_parser("attack", help="end-to-end scan attack")
    common(p, traces=True)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--transform", required=True, help="fitted transform blob")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="consolidate a run directory")
    p.add_argument("run_dir", help="directory with stage outputs")
    p.add_argument("--out", help="where to write the report (default: run dir)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = getattr(args, "threads", None)
        if threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - top-level CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
