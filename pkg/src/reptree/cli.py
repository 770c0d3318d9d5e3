"""Command line front end: config files, runs, sweeps, and plot exports.

Config files are INI: a [federation] section with the run parameters, an
optional [data] section describing the sample pool, an optional [model]
section for the architecture, and optional [client N] sections (0-based) that
override replicas / perturbation / depth / outputs for single clients.  Any
option can be overridden on the command line with --set section.key=value
(bare keys address [federation]).

Outputs per run directory: manifest.json (config snapshot, content hash,
timestamps), rounds.csv (per-round diversity diagnostics and metrics), and
results.json (effective config plus final metrics; no timestamps, so reruns
with the same config and seed are byte-identical regardless of --parallel).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .baselines import (
    SWEEP_ALIASES,
    SWEEPABLE,
    ExperimentSetup,
    centralized_rounds,
    fedavg_rounds,
    run_ablation,
    standalone_rounds,
)
from .data import CsvSchema, kfold_assign, generate_synthetic, load_csv, slice_targets
from .federation import run_federation
from .metrics import evaluate
from .models import ModelSpec
from .tree import FederationConfig, total_model_count

METHODS = ("reptreefl", "repfl", "fedavg", "standalone", "centralized")
ROUNDS_HEADER = ("round", "anchor", "replica_path", "div", "alpha", "loss", "acc-or-mae")
PLOTDATA_HEADER = ("method", "client", "fold", "metric", "value")
SUMMARY_HEADER = ("parameter", "value", "client", "fold", "metric", "score")

_BOOLEANS = {"true": True, "yes": True, "1": True, "on": True,
             "false": False, "no": False, "0": False, "off": False}


class ConfigError(ValueError):
    """A config file or override could not be used; message names the key."""


@dataclass
class RunManifest:
    """What a run directory was produced from and when."""

    config: dict
    config_hash: str
    root_seed: int
    created_utc: str
    finished_utc: str
    outputs: dict
    parallel: int
    model_count: int | None = None

    def as_dict(self) -> dict:
        out = {
            "config": self.config,
            "config_hash": self.config_hash,
            "root_seed": self.root_seed,
            "created_utc": self.created_utc,
            "finished_utc": self.finished_utc,
            "outputs": self.outputs,
            "parallel": self.parallel,
        }
        if self.model_count is not None:
            out["model_count"] = self.model_count
        return out


# -- config file handling -----------------------------------------------------

def _load_ini(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    target = Path(path)
    if not target.is_file():
        raise ConfigError(f"missing config file: {path}")
    with open(target, encoding="utf-8") as fh:
        parser.read_file(fh)
    return parser


def _apply_overrides(parser: configparser.ConfigParser, args) -> None:
    for pair in args.set or []:
        if "=" not in pair:
            raise ConfigError(f"bad --set {pair!r}, expected key=value")
        key, value = pair.split("=", 1)
        section, _, option = key.partition(".")
        if not option:
            section, option = "federation", key
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, option.strip(), value)
    if getattr(args, "seed", None) is not None:
        if not parser.has_section("federation"):
            parser.add_section("federation")
        parser.set("federation", "seed", str(args.seed))


def _get(parser, section: str, option: str, convert, default):
    if not parser.has_option(section, option):
        return default
    raw = parser.get(section, option)
    try:
        return convert(raw)
    except (ValueError, KeyError) as err:
        raise ConfigError(f"bad value for {section}.{option}: {raw!r}") from err


def _to_bool(raw: str) -> bool:
    return _BOOLEANS[raw.strip().lower()]


def _client_option(parser, n_clients: int, option: str, convert, base):
    """Scalar from [federation] unless some [client N] section overrides it."""
    values = [base] * n_clients
    touched = False
    for i in range(n_clients):
        section = f"client {i}"
        if parser.has_option(section, option):
            values[i] = _get(parser, section, option, convert, base)
            touched = True
    return values if touched else base


def _build_config(parser) -> FederationConfig:
    n_clients = _get(parser, "federation", "clients", int, None)
    if n_clients is None:
        raise ConfigError("federation.clients is required")
    return FederationConfig(
        n_clients=n_clients,
        replicas=_client_option(
            parser, n_clients, "replicas", int, _get(parser, "federation", "replicas", int, 3)
        ),
        perturbation=_client_option(
            parser, n_clients, "perturbation", float,
            _get(parser, "federation", "perturbation", float, 10.0),
        ),
        depth=_client_option(
            parser, n_clients, "depth", int, _get(parser, "federation", "depth", int, 1)
        ),
        local_epochs=_get(parser, "federation", "local_epochs", int, 10),
        rounds=_get(parser, "federation", "rounds", int, 10),
        lr=_get(parser, "federation", "lr", float, 0.005),
        batch_size=_get(parser, "federation", "batch_size", int, 20),
        optimizer=_get(parser, "federation", "optimizer", str, "sgd"),
        loss=_get(parser, "federation", "loss", str, "cross_entropy"),
        perturbation_mode=_get(parser, "federation", "perturbation_mode", str, "random"),
        aggregation_mode=_get(parser, "federation", "aggregation_mode", str, "diversity"),
        seed=_get(parser, "federation", "seed", int, 0),
    )


def _build_pool(parser, config: FederationConfig):
    kind = _get(parser, "data", "kind", str, "gaussian_blobs")
    folds = config.n_clients + 1
    if kind == "csv":
        path = _get(parser, "data", "path", str, None)
        if path is None:
            raise ConfigError("data.path is required when data.kind is csv")
        schema = CsvSchema(
            label_column=_get(parser, "data", "label_column", int, 0),
            header=_get(parser, "data", "header", _to_bool, False),
            kind=_get(parser, "data", "task", str, "classification"),
            n_classes=_get(parser, "data", "classes", int, None),
        )
        return load_csv(path, schema)
    if kind in ("gaussian_blobs", "regression_linear"):
        per_fold = _get(parser, "data", "samples_per_fold", int, 200)
        features = _get(parser, "data", "features", int, 16)
        if kind == "gaussian_blobs":
            outputs = _get(parser, "data", "classes", int, 4)
            return generate_synthetic(
                kind, per_fold * folds, features, outputs, config.seed,
                class_sep=_get(parser, "data", "class_sep", float, 2.5),
            )
        outputs = _get(parser, "data", "targets", int, 1)
        return generate_synthetic(
            kind, per_fold * folds, features, outputs, config.seed,
            noise=_get(parser, "data", "noise", float, 0.1),
        )
    raise ConfigError(f"unknown data.kind {kind!r}")


def _build_specs(parser, config: FederationConfig, pool):
    raw_hidden = _get(parser, "model", "hidden", str, "32,16")
    try:
        hidden = tuple(int(h.strip()) for h in raw_hidden.split(",") if h.strip())
    except ValueError as err:
        raise ConfigError(f"bad value for model.hidden: {raw_hidden!r}") from err
    activation = _get(parser, "model", "activation", str, "relu")
    personalized = _get(parser, "model", "personalized_head", _to_bool, False)
    if pool.is_classification:
        head = "classification"
        declared = _get(parser, "data", "classes", int, None)
        base_outputs = declared if declared is not None else int(pool.targets.max()) + 1
    else:
        head = "regression"
        base_outputs = pool.target_width
    outputs = _client_option(parser, config.n_clients, "outputs", int, base_outputs)
    slices = None
    if isinstance(outputs, list):
        if pool.is_classification:
            raise ConfigError("per-client output sizes require regression data")
        if sum(outputs) != pool.target_width:
            raise ConfigError(
                f"per-client outputs sum to {sum(outputs)} but the pool has "
                f"{pool.target_width} target columns; set data.targets to the sum"
            )
        # different target views force per-client heads
        personalized = True
        starts = np.cumsum([0] + outputs)
        slices = [(int(starts[i]), int(starts[i + 1])) for i in range(len(outputs))]
    else:
        outputs = [outputs] * config.n_clients
    specs = [
        ModelSpec(
            pool.n_features, hidden, outputs[i],
            head=head, activation=activation, personalized_head=personalized,
        )
        for i in range(config.n_clients)
    ]
    return specs, slices


def _stratified_folds(parser, pool) -> bool:
    choice = _get(parser, "data", "stratified_folds", str, "auto").strip().lower()
    if choice == "auto":
        return pool.is_classification
    if choice not in _BOOLEANS:
        raise ConfigError(f"bad value for data.stratified_folds: {choice!r}")
    wanted = _BOOLEANS[choice]
    if wanted and not pool.is_classification:
        raise ConfigError("stratified folds require classification data")
    return wanted


def _resolve_method(parser, args) -> str:
    method = args.method or _get(parser, "federation", "method", str, "reptreefl")
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")
    return method


def _effective_config(parser, config: FederationConfig, method: str, extra: dict) -> dict:
    sections = {}
    for name in parser.sections():
        if name != "federation":
            sections[name] = dict(parser.items(name))
    return {
        "method": method,
        "federation": config.as_dict(),
        "sections": sections,
        **extra,
    }


# -- serialization ------------------------------------------------------------

def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    raise TypeError(f"not JSON-serializable: {type(value).__name__}")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _config_hash(effective: dict) -> str:
    canonical = json.dumps(
        effective, sort_keys=True, separators=(",", ":"), default=_json_default
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _dotted(path) -> str:
    return ".".join(str(part) for part in path)


def _reports_json(reports) -> list:
    rounds = []
    for report in reports:
        anchors = []
        for record in report.anchors:
            anchors.append({
                "anchor": record.anchor_index,
                "losses": [float(x) for x in record.loss_trajectory],
                "metrics": record.metrics.as_dict() if record.metrics else None,
                "edges": [
                    {
                        "parent": _dotted(edge.parent_path),
                        "child": _dotted(edge.child_path),
                        "div": float(edge.div),
                        "alpha": float(edge.alpha),
                        "loss": float(edge.child_loss),
                    }
                    for edge in record.edges
                ],
            })
        rounds.append({"round": report.round_index, "anchors": anchors})
    return rounds


def _write_rounds_csv(path: Path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUNDS_HEADER)
        for report in reports:
            for record in report.anchors:
                for edge in record.edges:
                    writer.writerow([
                        report.round_index,
                        record.anchor_index,
                        _dotted(edge.child_path),
                        repr(float(edge.div)),
                        repr(float(edge.alpha)),
                        repr(float(edge.child_loss)),
                        "",
                    ])
                last_loss = (
                    repr(float(record.loss_trajectory[-1])) if record.loss_trajectory else ""
                )
                primary = (
                    repr(float(record.metrics.primary)) if record.metrics is not None else ""
                )
                writer.writerow([
                    report.round_index,
                    record.anchor_index,
                    str(record.anchor_index),
                    "",
                    "",
                    last_loss,
                    primary,
                ])


def _metric_name(metrics) -> str:
    return "accuracy" if metrics.accuracy is not None else "mae"


# -- subcommands ---------------------------------------------------------------

def _dispatch(method, config, clients, specs, tests, shared_test, workers):
    if method in ("reptreefl", "repfl"):
        return run_federation(config, clients, specs, test_data=tests, max_workers=workers)
    if method == "fedavg":
        return fedavg_rounds(config, clients, specs, test_data=tests, max_workers=workers)
    if method == "standalone":
        return standalone_rounds(config, clients, specs, test_data=tests)
    params, reports = centralized_rounds(config, clients, specs, test_data=shared_test)
    return [params], reports


def cmd_run(args) -> int:
    parser = _load_ini(args.config)
    _apply_overrides(parser, args)
    method = _resolve_method(parser, args)
    config = _build_config(parser)
    if method == "repfl":
        config = replace(config, aggregation_mode="simple", depth=1)
    pool = _build_pool(parser, config)
    specs, slices = _build_specs(parser, config, pool)

    folds = config.n_clients + 1
    plan = kfold_assign(
        pool, folds, seed=config.seed, stratified=_stratified_folds(parser, pool)
    )
    fold_config = _get(parser, "federation", "fold_config", int, 0)
    if not 0 <= fold_config < folds:
        raise ConfigError(f"federation.fold_config must be in [0, {folds}), got {fold_config}")
    client_folds, test_fold = plan.client_test_folds(fold_config, config.n_clients)
    clients = [pool.take(plan.fold_positions(f)) for f in client_folds]
    shared_test = pool.take(plan.fold_positions(test_fold))
    if slices is not None:
        clients = [slice_targets(ds, *slices[i]) for i, ds in enumerate(clients)]
        tests = [slice_targets(shared_test, *slices[i]) for i in range(config.n_clients)]
    else:
        tests = shared_test

    created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    models, reports = _dispatch(
        method, config, clients, specs, tests, shared_test, args.parallel
    )
    finished = datetime.now(timezone.utc).isoformat(timespec="seconds")

    if method == "centralized":
        final = [evaluate(models[0], shared_test)]
    elif slices is not None:
        final = [evaluate(model, tests[i]) for i, model in enumerate(models)]
    else:
        final = [evaluate(model, shared_test) for model in models]

    effective = _effective_config(
        parser, config, method, {"fold_config": fold_config, "folds": folds}
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = _config_hash(effective)
    manifest = RunManifest(
        config=effective,
        config_hash=digest,
        root_seed=config.seed,
        created_utc=created,
        finished_utc=finished,
        outputs={
            "manifest": "manifest.json",
            "rounds": "rounds.csv",
            "results": "results.json",
        },
        parallel=args.parallel,
        model_count=total_model_count(config) if method in ("reptreefl", "repfl") else None,
    )
    _write_json(out / "manifest.json", manifest.as_dict())
    _write_rounds_csv(out / "rounds.csv", reports)
    _write_json(out / "results.json", {
        "config": effective,
        "config_hash": digest,
        "method": method,
        "final": [metrics.as_dict() for metrics in final],
        "rounds": _reports_json(reports),
    })
    print(f"wrote {out / 'results.json'}")
    return 0


def _parse_sweep(spec: str):
    if "=" not in spec:
        raise ConfigError(f"bad --sweep {spec!r}, expected parameter=v1,v2,...")
    name, _, rest = spec.partition("=")
    name = name.strip()
    canonical = SWEEP_ALIASES.get(name, name)
    if canonical not in SWEEPABLE:
        raise ConfigError(
            f"unknown sweep parameter {name!r}, expected one of {SWEEPABLE + tuple(SWEEP_ALIASES)}"
        )
    convert = {
        "perturbation": float,
        "depth": int,
        "dataset_size": int,
        "aggregation_mode": str,
        "perturbation_mode": str,
    }[canonical]
    raw_values = [chunk.strip() for chunk in rest.split(",") if chunk.strip()]
    if not raw_values:
        raise ConfigError(f"--sweep {spec!r} lists no values")
    try:
        values = [convert(chunk) for chunk in raw_values]
    except ValueError as err:
        raise ConfigError(f"bad sweep value in {spec!r}") from err
    return canonical, values


def cmd_sweep(args) -> int:
    parser = _load_ini(args.config)
    _apply_overrides(parser, args)
    method = _resolve_method(parser, args)
    if method not in ("reptreefl", "repfl"):
        raise ConfigError("sweeps drive the replica-tree method; use --method reptreefl or repfl")
    config = _build_config(parser)
    if method == "repfl":
        config = replace(config, aggregation_mode="simple", depth=1)
    pool = _build_pool(parser, config)
    specs, slices = _build_specs(parser, config, pool)
    stratified = _stratified_folds(parser, pool)
    setup = ExperimentSetup(
        pool, config.n_clients + 1, specs,
        stratified_folds=stratified, target_slices=slices,
    )
    parameter, values = _parse_sweep(args.sweep)
    results = run_ablation(config, setup, parameter, values, max_workers=args.parallel)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, result in zip(values, results):
        point_dir = out / f"{parameter}={value}"
        point_dir.mkdir(parents=True, exist_ok=True)
        _write_json(point_dir / "results.json", {
            "config": result.config,
            "method": result.method,
            "per_fold": [
                [metrics.as_dict() for metrics in fold] for fold in result.per_fold
            ],
            "mean": result.mean,
            "std": result.std,
        })
        for fold_index, fold in enumerate(result.per_fold):
            for client, metrics in enumerate(fold):
                rows.append([
                    parameter, value, client, fold_index,
                    _metric_name(metrics), repr(float(metrics.primary)),
                ])
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(rows)
    print(f"wrote {out / 'summary.csv'} ({len(rows)} rows, {len(values)} sweep points)")
    return 0


def _plot_rows(path: Path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"corrupt results file {path}: {err}") from err
    method = data.get("method")
    if method is None:
        raise ConfigError(f"no method recorded in {path}")
    rows = []
    if "per_fold" in data:
        for fold_index, fold in enumerate(data["per_fold"]):
            for client, metrics in enumerate(fold):
                for name, value in metrics.items():
                    rows.append([method, client, fold_index, name, repr(float(value))])
    elif "final" in data:
        fold_index = data.get("config", {}).get("fold_config", 0)
        for client, metrics in enumerate(data["final"]):
            for name, value in metrics.items():
                rows.append([method, client, fold_index, name, repr(float(value))])
    else:
        raise ConfigError(f"{path} holds neither per-fold nor final metrics")
    return rows


def cmd_plotdata(args) -> int:
    if not args.results:
        raise ConfigError("no result directories given")
    rows = []
    for entry in args.results:
        path = Path(entry)
        if path.is_dir():
            path = path / "results.json"
        if not path.is_file():
            raise ConfigError(f"no results.json at {entry}")
        rows.extend(_plot_rows(path))
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOTDATA_HEADER)
        writer.writerows(rows)
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


# -- entry point ---------------------------------------------------------------

def build_cli() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reptree", description="Replica-tree federated learning simulator."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one fold configuration and persist results")
    sweep_p = sub.add_parser("sweep", help="run a cross-validated parameter sweep")
    for p in (run_p, sweep_p):
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--method", choices=METHODS, help="override the configured method")
        p.add_argument("--seed", type=int, help="override federation.seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--parallel", type=int, default=1,
                       help="worker threads for client updates (default: 1)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config option; bare keys address [federation]")
    run_p.set_defaults(func=cmd_run)
    sweep_p.add_argument("--sweep", required=True, metavar="PARAM=V1,V2,...",
                         help=f"sweep axis, one of {SWEEPABLE + tuple(SWEEP_ALIASES)}")
    sweep_p.set_defaults(func=cmd_sweep)

    plot_p = sub.add_parser("plotdata", help="merge results.json files into a tidy CSV")
    plot_p.add_argument("results", nargs="*",
                        help="run directories (or results.json paths) to merge")
    plot_p.add_argument("--out", default="plotdata.csv",
                        help="output CSV path (default: plotdata.csv)")
    plot_p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None) -> int:
    args = build_cli().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, configparser.Error) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
