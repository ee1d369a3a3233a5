"""Command-line entry point: ``crashcast <command> --config run.yaml [...]``.

Every command writes into its ``--out`` directory together with a
``run.json`` manifest (config hash, seed, tool version). Commands talk to each
other only through those files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .archive import ArchiveError, config_hash, read_archive, read_manifest, write_archive
from .baselines import (
    BaselineError,
    LinearModel,
    arima_forecast_grid,
    fit_lr,
    predict_lr,
)
from .benchmark import benchmark_cube
from .config import ConfigError, load_config, regimes, run_hash, severity_weights, train_config
from .convlstm import (
    ConvLSTMError,
    SkippedRegion,
    load_region_model,
    predict_region,
    save_region_model,
    train_region,
)
from .cube import (
    CubeError,
    GridSpec,
    build_cube,
    chronological_split,
    load_crash_csv,
    load_cube,
    load_features_csv,
    save_cube,
    synth_cube,
)
from .ensemble import (
    EnsembleError,
    ForecastGrid,
    load_ensemble,
    partition,
    predict_ensemble,
    read_forecast_csv,
    save_ensemble,
    train_ensemble,
    write_forecast_csv,
)
from .evaluation import (
    EvalReport,
    EvaluationError,
    cluster_dtw,
    crossk_evaluate,
    default_radii,
    read_labels_csv,
    score,
    write_crossk_csv,
    write_labels_csv,
)

log = logging.getLogger("crashcast")

TRAIN_SECTIONS = ("seed", "split", "train", "ensemble", "baselines")


class CommandError(Exception):
    pass


def _cube_fingerprint(cube):
    h = config_hash({"shape": list(cube.target.shape)})
    digest = hashlib.sha256(np.ascontiguousarray(cube.target).tobytes())
    digest.update(np.ascontiguousarray(cube.grid.road_length_miles).tobytes())
    return h[:4] + digest.hexdigest()[:12]


def _write_run_manifest(out, cfg, command, extra=None):
    manifest = {
        "tool": "crashcast",
        "version": __version__,
        "command": command,
        "config_hash": run_hash(cfg),
        "train_hash": run_hash(cfg, TRAIN_SECTIONS),
        "seed": cfg["seed"],
    }
    if extra:
        manifest.update(extra)
    (Path(out) / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cube_arg(path):
    try:
        return load_cube(path)
    except (ArchiveError, CubeError, FileNotFoundError) as exc:
        raise CommandError(f"cube archive {path}: {exc}") from exc


def _split(cfg, cube):
    return chronological_split(cube.T, cfg["split"]["test_weeks"], cfg["split"]["validation_fraction"])


def _check_provenance(meta, cfg, cube, what):
    if meta.get("train_hash") != run_hash(cfg, TRAIN_SECTIONS):
        raise CommandError(f"{what}: trained under a different config (hash {meta.get('train_hash')} "
                           f"vs {run_hash(cfg, TRAIN_SECTIONS)})")
    if meta.get("cube_fingerprint") != _cube_fingerprint(cube):
        raise CommandError(f"{what}: trained on a different cube")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg):
    s = cfg["synth"]
    if s["benchmark"]:
        cube = benchmark_cube(cfg["seed"])
    else:
        grid = GridSpec.uniform(s["width"], s["height"], s["cell_size_miles"])
        cube = synth_cube(grid, s["weeks"], regimes(cfg), cfg["seed"])
    out = _out_dir(args)
    save_cube(out / "cube", cube)
    _write_run_manifest(out, cfg, "synth", {"cube_fingerprint": _cube_fingerprint(cube)})
    log.info("wrote %dx%d cube over %d weeks to %s", cube.grid.width, cube.grid.height, cube.T, out / "cube")


def cmd_ingest(args, cfg):
    ing = cfg["ingest"]
    if not (ing["width"] and ing["height"]):
        raise CommandError("ingest.width and ingest.height are required")
    probe = GridSpec.uniform(ing["width"], ing["height"], ing["cell_size_miles"])
    feats = load_features_csv(args.features, probe) if args.features else {}
    if "road_length" not in feats:
        raise CommandError(f"{args.features or 'features CSV'}: a road_length feature is required")
    grid = GridSpec(ing["width"], ing["height"], ing["cell_size_miles"], feats["road_length"])
    records = load_crash_csv(args.crashes)
    cube = build_cube(records, grid, severity_weights(cfg), ing["weeks"], feats)
    out = _out_dir(args)
    save_cube(out / "cube", cube)
    _write_run_manifest(out, cfg, "ingest", {"cube_fingerprint": _cube_fingerprint(cube),
                                             "records": len(records)})


def cmd_train_ensemble(args, cfg):
    cube = _load_cube_arg(args.cube)
    split = _split(cfg, cube)
    e = cfg["ensemble"]
    windows, coverage = partition(cube.grid, tuple(e["window"]), tuple(e["stride"]))
    gaps = [c for c in coverage.uncovered if cube.grid.road_mask[c[1], c[0]]]
    if gaps and e["fallback"] is None:
        raise CommandError(f"road cell {gaps[0]} is covered by no window and ensemble.fallback is null")
    ens = train_ensemble(cube, split, windows, train_config(cfg), seed_base=cfg["seed"],
                         workers=args.workers, drop_factor=e["drop_factor"],
                         progress=lambda i, n: log.info("window %d/%d trained", i + 1, n))
    out = _out_dir(args)
    meta = {"train_hash": run_hash(cfg, TRAIN_SECTIONS), "cube_fingerprint": _cube_fingerprint(cube),
            "uncovered_road_cells": [list(c) for c in gaps]}
    save_ensemble(out / "model", ens, meta)
    _write_run_manifest(out, cfg, "train-ensemble", {"windows": len(windows), "trained": len(ens.models),
                                                     "skipped": len(ens.skipped)})


def cmd_train_baseline(args, cfg):
    cube = _load_cube_arg(args.cube)
    split = _split(cfg, cube)
    b = cfg["baselines"]
    out = _out_dir(args)
    meta = {"train_hash": run_hash(cfg, TRAIN_SECTIONS), "cube_fingerprint": _cube_fingerprint(cube)}
    if args.kind == "lr":
        model = fit_lr(cube, split, b["lr_lookback"], b["ridge_tau"])
        meta.update(lookback=model.lookback, feature_names=model.feature_names, tau=model.tau)
        write_archive(out / "model", {"coef": model.coef}, meta, kind="lr")
    elif args.kind == "arima":
        # per-cell fits are cheap to redo; the archive pins the order and training range
        meta.update(order=list(b["arima_order"]), train_weeks=[split.train_weeks.start, split.train_weeks.stop])
        write_archive(out / "model", {}, meta, kind="arima")
    else:
        model = train_region(cube, split, train_config(cfg))
        if isinstance(model, SkippedRegion):
            raise CommandError(f"global ConvLSTM skipped: {model.reason}")
        save_region_model(out / "model", model, meta)
    _write_run_manifest(out, cfg, f"train-baseline {args.kind}")


def cmd_predict(args, cfg):
    cube = _load_cube_arg(args.cube)
    split = _split(cfg, cube)
    weeks = list(split.test_weeks)
    try:
        manifest = read_manifest(args.model)
    except (ArchiveError, FileNotFoundError) as exc:
        raise CommandError(f"model archive {args.model}: {exc}") from exc
    kind, meta = manifest["kind"], manifest["meta"]
    _check_provenance(meta, cfg, cube, f"model archive {args.model}")
    if kind == "ensemble":
        ens = load_ensemble(args.model)
        fallback = cfg["ensemble"]["fallback"]
        values = predict_ensemble(ens, cube, weeks, fallback=fallback, workers=args.workers).values
    elif kind == "convlstm":
        values = predict_region(load_region_model(args.model), cube, weeks)
    elif kind == "lr":
        arrays, meta = read_archive(args.model, kind="lr")
        model = LinearModel(int(meta["lookback"]), list(meta["feature_names"]), arrays["coef"], float(meta["tau"]))
        values = predict_lr(model, cube, weeks)
    elif kind == "arima":
        values, flags = arima_forecast_grid(cube, split, weeks, tuple(meta["order"]), workers=args.workers)
        if flags:
            log.info("ARIMA fallback used on %d cells", len(flags))
    else:
        raise CommandError(f"model archive {args.model}: unknown kind {kind!r}")
    out = _out_dir(args)
    label = args.label or kind
    write_forecast_csv(out / "forecast.csv", ForecastGrid(values, weeks, label))
    _write_run_manifest(out, cfg, "predict", {"model_kind": kind, "label": label})


def cmd_evaluate(args, cfg):
    cube = _load_cube_arg(args.cube)
    shape = (cube.grid.height, cube.grid.width)
    labels = read_labels_csv(args.labels, shape) if args.labels else None
    ev = cfg["evaluation"]
    radii = default_radii(ev["radius_stop"], ev["radius_step"])
    report = EvalReport(meta={"config_hash": run_hash(cfg), "seed": cfg["seed"], "version": __version__,
                              "cube_fingerprint": _cube_fingerprint(cube)})
    out = _out_dir(args)
    for spec in args.forecast:
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = Path(spec).parent.name or Path(spec).stem, spec
        if not Path(path).is_file():
            raise CommandError(f"forecast {path}: no such file")
        fc = read_forecast_csv(path, shape, label)
        report.models[label] = score(fc, cube, labels)
        report.crossk[label] = crossk_evaluate(fc, cube, radii)
        write_crossk_csv(out / f"crossk_{label}.csv", report.crossk[label])
    (out / "report.json").write_text(report.to_json())
    (out / "table.txt").write_text(report.table())
    _write_run_manifest(out, cfg, "evaluate", {"forecasts": list(report.models)})
    sys.stdout.write(report.table())


def cmd_cluster(args, cfg):
    cube = _load_cube_arg(args.cube)
    split = _split(cfg, cube)
    ev = cfg["evaluation"]
    labels = cluster_dtw(cube, ev["clusters"], cfg["seed"], weeks=split.train_weeks,
                         max_iter=ev["cluster_max_iter"])
    out = _out_dir(args)
    write_labels_csv(out / "labels.csv", labels)
    _write_run_manifest(out, cfg, "cluster", {"clusters": ev["clusters"]})


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workers", type=int, help="worker processes (default: config, env, or CPU count)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.epochs=5")

    parser = argparse.ArgumentParser(prog="crashcast", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"crashcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic cube")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="build a cube from crash and feature CSVs")
    p.add_argument("--crashes", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-ensemble", parents=[common], help="train the moving-window ensemble")
    p.add_argument("--cube", required=True)
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("train-baseline", parents=[common], help="fit a reference model")
    p.add_argument("kind", choices=["lr", "arima", "convlstm-global"])
    p.add_argument("--cube", required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("predict", parents=[common], help="forecast the test weeks with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--cube", required=True)
    p.add_argument("--label")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score forecasts against a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--forecast", action="append", required=True, metavar="[LABEL=]CSV")
    p.add_argument("--labels", help="cluster labels CSV (cell_x,cell_y,label)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cluster", parents=[common], help="DTW k-medoids risk-zone labels")
    p.add_argument("--cube", required=True)
    p.set_defaults(func=cmd_cluster)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("CRASHCAST_VERBOSITY", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.workers is None:
            env = os.environ.get("CRASHCAST_WORKERS")
            args.workers = int(env) if env else (cfg["workers"] or os.cpu_count() or 1)
        args.func(args, cfg)
    except (CommandError, ConfigError, CubeError, ConvLSTMError, EnsembleError, EvaluationError,
            BaselineError, ArchiveError, FileNotFoundError) as exc:
        print(f"crashcast {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
