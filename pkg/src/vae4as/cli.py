"""Experiment runner and command-line interface.

Configuration is a flat ``key = value`` text file (``#`` starts a comment)
plus ``--set key=value`` overrides.  Keys are the experiment fields below
and every ``PipelineConfig`` field.  Every file written by an experiment
carries the hash of its resolved configuration in its name.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import (BUILTIN_STREAMS, builtin_stream, generate_stream, load_csv_stream,
                      make_pretraining_sets, write_csv_stream)
from .errors import ConfigError, ContractViolation, DataError, NumericalError
from .evaluation import FadedCounts, aggregate_runs, prequential_update, score_alarms
from .pipeline import DD_MODES, Pipeline, PipelineConfig
from .vae import save_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# per-dataset departures from the PipelineConfig defaults
DATASET_DEFAULTS = {
    "vib": {"beta": 0.0},
    # real-valued Gaussian features: squared error, as for real data
    "gauss": {"loss_kind": "squared_error"},
}
CSV_DEFAULTS = {"w_drift": 200, "loss_kind": "squared_error"}

METRIC_COLUMNS = ("t", "y_true", "y_pred", "loss", "theta", "g_mean", "warn", "alarm_source")


@dataclass
class ExperimentConfig:
    dataset: str = "sea"
    n_runs: int = 1
    seeds: tuple = ()
    out_dir: str = "results"
    tolerance: int = 1000
    alpha: float = 0.99
    # CSV datasets: the first ``pretrain_rows`` rows are offline data
    # (normals for training, anomalies for the distance reference)
    pretrain_rows: int = 2000
    label_column: str = "label"
    drift_times: tuple = ()
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        if self.n_runs < 1:
            raise ConfigError("n_runs must be positive")
        if not self.seeds:
            self.seeds = tuple(range(1, self.n_runs + 1))
        self.seeds = tuple(int(s) for s in self.seeds)
        self.n_runs = len(self.seeds)
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.tolerance < 1:
            raise ConfigError("tolerance must be positive")

    @property
    def is_builtin(self) -> bool:
        return self.dataset.lower() in BUILTIN_STREAMS

    def flat(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "pipeline"}
        for f in fields(PipelineConfig):
            out[f.name] = getattr(self.pipeline, f.name)
        return out

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        blob = json.dumps({k: _jsonable(v) for k, v in self.flat().items() if k != "out_dir"},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def to_text(self) -> str:
        lines = [f"# resolved configuration {self.config_hash()}"]
        for k, v in sorted(self.flat().items()):
            lines.append(f"{k} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- configuration parsing -------------------------------------------------

_EXPERIMENT_KEYS = [f.name for f in fields(ExperimentConfig) if f.name != "pipeline"]
_PIPELINE_KEYS = PipelineConfig.field_names()
KNOWN_KEYS = set(_EXPERIMENT_KEYS) | set(_PIPELINE_KEYS)


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _coerce(key: str, text: str, kind):
    """Convert a raw config string to the declared field type."""
    s = text.strip()
    args = typing.get_args(kind)
    if type(None) in args:
        if s.lower() in ("none", "null", ""):
            return None
        kind = next(a for a in args if a is not type(None))
    try:
        if kind is bool:
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if kind in (int, float):
            return kind(s)
        if kind is tuple or typing.get_origin(kind) is tuple:
            return tuple(int(p) for p in s.replace(";", ",").split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return s


def read_config_file(path) -> dict:
    """Parse a ``key = value`` file into a dict of raw strings."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(values: dict | None = None) -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from flat key/value pairs.

    Dataset defaults apply first, then ``values`` (strings or typed).
    Unknown keys raise ``ConfigError`` naming all of them.
    """
    values = dict(values or {})
    unknown = sorted(set(values) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    dataset = str(values.get("dataset", ExperimentConfig.dataset))
    if dataset.lower() in BUILTIN_STREAMS:
        merged = dict(DATASET_DEFAULTS.get(dataset.lower(), {}))
    else:
        merged = dict(CSV_DEFAULTS)
    merged.update(values)

    etypes = _field_types(ExperimentConfig)
    ptypes = _field_types(PipelineConfig)
    exp_kw, pipe_kw = {}, {}
    for k, v in merged.items():
        kind = etypes[k] if k in _EXPERIMENT_KEYS else ptypes[k]
        if isinstance(v, str):
            v = _coerce(k, v, kind)
        (exp_kw if k in _EXPERIMENT_KEYS else pipe_kw)[k] = v
    if "dd_mode" in pipe_kw and pipe_kw["dd_mode"] not in DD_MODES:
        raise ConfigError(f"dd_mode must be one of {DD_MODES}")
    try:
        pipeline = PipelineConfig(**pipe_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(pipeline=pipeline, **exp_kw)


# -- data ------------------------------------------------------------------


@dataclass
class RunData:
    train: np.ndarray
    anomaly_reference: np.ndarray
    stream: list
    drift_times: tuple
    validation_x: np.ndarray | None = None
    validation_y: np.ndarray | None = None


def check_dataset(cfg: ExperimentConfig) -> None:
    if not cfg.is_builtin and not Path(cfg.dataset).exists():
        raise DataError(f"dataset {cfg.dataset!r} is neither a builtin "
                        f"({', '.join(sorted(BUILTIN_STREAMS))}) nor an existing CSV file")


def prepare_data(cfg: ExperimentConfig, seed: int) -> RunData:
    check_dataset(cfg)
    if cfg.is_builtin:
        spec = builtin_stream(cfg.dataset)
        sets = make_pretraining_sets(spec, seed)
        return RunData(sets.train, sets.anomaly_reference, list(generate_stream(spec, seed)),
                       tuple(cfg.drift_times) or tuple(spec.drift_times),
                       sets.validation_x, sets.validation_y)
    path = Path(cfg.dataset)
    label_column = int(cfg.label_column) if cfg.label_column.lstrip("-").isdigit() \
        else cfg.label_column
    rows = list(load_csv_stream(path, label_column))
    head, tail = rows[:cfg.pretrain_rows], rows[cfg.pretrain_rows:]
    if not tail:
        raise DataError(f"{path}: no rows left to stream after {cfg.pretrain_rows} pre-training rows")
    train = np.array([r.x for r in head if r.y_true == 0])
    anomalies = np.array([r.x for r in head if r.y_true == 1])
    if train.size == 0:
        raise DataError(f"{path}: no normal rows among the first {cfg.pretrain_rows}")
    if anomalies.size == 0:
        anomalies = np.empty((0, train.shape[1]))
    stream = [type(r)(r.x, r.y_true, i) for i, r in enumerate(tail, start=1)]
    return RunData(train, anomalies, stream, tuple(cfg.drift_times))


# -- running ---------------------------------------------------------------


@dataclass
class RunResult:
    seed: int
    y_true: np.ndarray
    y_pred: np.ndarray
    losses: np.ndarray
    thetas: np.ndarray
    g_mean: np.ndarray
    warn: np.ndarray
    alarm_source: list
    events: list
    drift_times: tuple
    detected: list
    delays: list
    false_alarms: int
    validation_g_mean: float | None = None

    @property
    def final_g_mean(self) -> float:
        return float(self.g_mean[-1]) if len(self.g_mean) else float("nan")

    @property
    def alarm_steps(self) -> list:
        return [e.t for e in self.events if e.kind == "alarm"]

    def metric_rows(self):
        for i in range(len(self.y_true)):
            yield (i + 1, int(self.y_true[i]), int(self.y_pred[i]), repr(float(self.losses[i])),
                   repr(float(self.thetas[i])), repr(float(self.g_mean[i])), int(self.warn[i]),
                   self.alarm_source[i])


def run_single(cfg: ExperimentConfig, seed: int) -> RunResult:
    """Pre-train and stream one seeded run (nothing is written)."""
    data = prepare_data(cfg, seed)
    pcfg = replace(cfg.pipeline, seed=seed)
    pipe = Pipeline.pretrain(data.train, data.anomaly_reference, pcfg)
    val_g = None
    if data.validation_x is not None:
        val_g = pipe.validation_gmean(data.validation_x, data.validation_y)
    n = len(data.stream)
    y_true = np.empty(n, dtype=int)
    y_pred = np.empty(n, dtype=int)
    losses = np.empty(n)
    thetas = np.empty(n)
    gm = np.empty(n)
    warn = np.empty(n, dtype=int)
    sources = []
    counts = FadedCounts(cfg.alpha)
    for i, inst in enumerate(data.stream):
        out = pipe.step(inst.x)
        y_true[i] = inst.y_true
        y_pred[i] = out.y_pred
        losses[i] = out.instance_loss
        thetas[i] = out.theta
        gm[i] = prequential_update(counts, inst.y_true, out.y_pred)
        warn[i] = int(pipe.drift.flag_warn)
        sources.append(out.alarm)
    alarms = pipe.alarm_steps
    score = score_alarms(alarms, data.drift_times, cfg.tolerance)
    return RunResult(seed, y_true, y_pred, losses, thetas, gm, warn, sources, list(pipe.events),
                     data.drift_times, score.detected, score.delays, score.false_alarms, val_g)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    runs: list
    summary: dict
    paths: dict


def write_metrics_csv(path, run: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        w.writerows(run.metric_rows())


def read_metrics_csv(path) -> dict:
    """Load a metrics file back into arrays keyed by column name."""
    cols = {c: [] for c in METRIC_COLUMNS}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise DataError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            for c in METRIC_COLUMNS:
                cols[c].append(row[c])
    out = {c: np.array([int(v) for v in cols[c]]) for c in ("t", "y_true", "y_pred", "warn")}
    for c in ("loss", "theta", "g_mean"):
        out[c] = np.array([float(v) for v in cols[c]])
    out["alarm_source"] = cols["alarm_source"]
    return out


def summarize(runs: list) -> dict:
    finals = np.array([r.final_g_mean for r in runs])
    fas = np.array([r.false_alarms for r in runs], dtype=float)
    r = len(runs)
    return {
        "runs": [
            {"seed": run.seed, "final_g_mean": run.final_g_mean, "detected": run.detected,
             "delays": run.delays, "false_alarms": run.false_alarms, "alarms": run.alarm_steps,
             "validation_g_mean": run.validation_g_mean}
            for run in runs
        ],
        "final_g_mean_mean": float(finals.mean()),
        "final_g_mean_stderr": float(finals.std() / math.sqrt(r)),
        "false_alarms_mean": float(fas.mean()),
        "false_alarms_stderr": float(fas.std() / math.sqrt(r)),
        "runs_detecting_all": int(sum(all(run.detected) for run in runs)),
    }


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every seed and write metrics, events, summary and resolved config."""
    check_dataset(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    paths = {"config": out / f"config_{h}.txt", "metrics": [], "events": []}
    paths["config"].write_text(cfg.to_text())
    runs = []
    for seed in cfg.seeds:
        logger.info("dataset %s seed %d", cfg.dataset, seed)
        run = run_single(cfg, seed)
        runs.append(run)
        mpath = out / f"metrics_{h}_seed{seed}.csv"
        write_metrics_csv(mpath, run)
        epath = out / f"events_{h}_seed{seed}.jsonl"
        with open(epath, "w") as fh:
            for e in run.events:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        paths["metrics"].append(mpath)
        paths["events"].append(epath)
    summary = summarize(runs)
    summary["config_hash"] = h
    summary["dataset"] = cfg.dataset
    paths["summary"] = out / f"summary_{h}.json"
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if len({len(r.g_mean) for r in runs}) == 1:
        mean, stderr = aggregate_runs([r.g_mean for r in runs])
        paths["g_mean"] = out / f"gmean_{h}.csv"
        with open(paths["g_mean"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("t", "g_mean_mean", "g_mean_stderr"))
            for t, (m, s) in enumerate(zip(mean, stderr), start=1):
                w.writerow((t, repr(float(m)), repr(float(s))))
    return ExperimentResult(cfg, runs, summary, paths)


def sweep(cfg: ExperimentConfig, parameter: str, values) -> list[dict]:
    """One experiment per value of ``parameter``; returns one summary row per value."""
    if parameter not in KNOWN_KEYS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = cfg.flat()
    table = []
    for v in values:
        flat = dict(base)
        flat[parameter] = v
        sub = resolve_config(flat)
        res = run_experiment(sub)
        s = res.summary
        table.append({
            "parameter": parameter, "value": v, "config_hash": s["config_hash"],
            "final_g_mean_mean": s["final_g_mean_mean"],
            "final_g_mean_stderr": s["final_g_mean_stderr"],
            "false_alarms_mean": s["false_alarms_mean"],
            "false_alarms": [r["false_alarms"] for r in s["runs"]],
        })
    h = cfg.config_hash()
    path = Path(cfg.out_dir) / f"sweep_{parameter}_{h}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("value", "config_hash", "final_g_mean_mean", "final_g_mean_stderr",
                    "false_alarms_mean"))
        for row in table:
            w.writerow((_format_value(row["value"]), row["config_hash"],
                        repr(row["final_g_mean_mean"]), repr(row["final_g_mean_stderr"]),
                        repr(row["false_alarms_mean"])))
    return table


def evaluate_metrics(path, drift_times=(), tolerance: int = 1000, alpha: float = 0.99) -> dict:
    """Recompute the headline numbers of one metrics file."""
    m = read_metrics_csv(path)
    counts = FadedCounts(alpha)
    g = 1.0
    for a, b in zip(m["y_true"], m["y_pred"]):
        g = prequential_update(counts, int(a), int(b))
    alarms = [int(t) for t, s in zip(m["t"], m["alarm_source"]) if s != "none"]
    score = score_alarms(alarms, drift_times, tolerance)
    return {"file": str(path), "steps": int(len(m["t"])), "final_g_mean": g, "alarms": alarms,
            "detected": score.detected, "delays": score.delays,
            "false_alarms": score.false_alarms}


# -- command line ------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--dataset", help="builtin stream name or CSV path")
    common.add_argument("--seed", type=int, help="run a single seed")
    common.add_argument("--runs", type=int, help="number of seeded runs (seeds 1..N)")
    common.add_argument("--dd-mode", choices=DD_MODES)
    common.add_argument("--out", help="output directory (or file for generate)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vae4as", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a builtin stream to CSV")
    sub.add_parser("pretrain", parents=[common], help="pre-train and save a checkpoint")
    sub.add_parser("run", parents=[common], help="run seeded experiments")
    sw = sub.add_parser("sweep", parents=[common], help="sweep one configuration key")
    sw.add_argument("--param", required=True)
    sw.add_argument("--values", required=True, help="comma-separated values")
    ev = sub.add_parser("evaluate", parents=[common], help="summarize metrics files")
    ev.add_argument("files", nargs="*", help="metrics CSVs (default: all in --out)")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    if args.dataset:
        values["dataset"] = args.dataset
    if args.runs is not None:
        values["n_runs"] = str(args.runs)
        values.pop("seeds", None)
    if args.seed is not None:
        values["seeds"] = str(args.seed)
    if args.dd_mode:
        values["dd_mode"] = args.dd_mode
    if args.out and args.command != "generate":
        values["out_dir"] = args.out
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return resolve_config(values)


def _cmd_generate(cfg: ExperimentConfig, args) -> None:
    if not cfg.is_builtin:
        raise ConfigError("generate needs a builtin dataset")
    spec = builtin_stream(cfg.dataset)
    out = Path(args.out or f"{spec.name}_seed{cfg.seeds[0]}.csv")
    if out.suffix != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / f"{spec.name}_seed{cfg.seeds[0]}.csv"
    n = write_csv_stream(out, generate_stream(spec, cfg.seeds[0]))
    print(f"wrote {n} rows to {out}")


def _cmd_pretrain(cfg: ExperimentConfig) -> None:
    seed = cfg.seeds[0]
    data = prepare_data(cfg, seed)
    pipe = Pipeline.pretrain(data.train, data.anomaly_reference,
                             replace(cfg.pipeline, seed=seed))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"model_{cfg.config_hash()}_seed{seed}.npz"
    save_checkpoint(path, pipe.model, pipe.normalizer)
    (out / f"config_{cfg.config_hash()}.txt").write_text(cfg.to_text())
    msg = f"theta {pipe.theta!r} distance threshold {pipe.drift.dis_thre!r}"
    if data.validation_x is not None:
        msg += f" validation G-mean {pipe.validation_gmean(data.validation_x, data.validation_y):.4f}"
    print(msg)
    print(f"checkpoint {path}")


def _print_summary(summary: dict) -> None:
    for r in summary["runs"]:
        print(f"seed {r['seed']}: final G-mean {r['final_g_mean']:.4f} "
              f"detected {r['detected']} false alarms {r['false_alarms']}")
    print(f"mean final G-mean {summary['final_g_mean_mean']:.4f} "
          f"(stderr {summary['final_g_mean_stderr']:.4f}), "
          f"mean false alarms {summary['false_alarms_mean']:.2f}")


def _cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    files = [Path(f) for f in args.files] or sorted(Path(cfg.out_dir).glob("metrics_*.csv"))
    if not files:
        raise DataError(f"no metrics files found in {cfg.out_dir}")
    drifts = cfg.drift_times
    if not drifts and cfg.is_builtin:
        drifts = builtin_stream(cfg.dataset).drift_times
    for f in files:
        if not f.exists():
            raise DataError(f"no such file: {f}")
        r = evaluate_metrics(f, drifts, cfg.tolerance, cfg.alpha)
        print(f"{f.name}: steps {r['steps']} final G-mean {r['final_g_mean']:.4f} "
              f"alarms {r['alarms']} detected {r['detected']} false alarms {r['false_alarms']}")


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        if args.command == "generate":
            _cmd_generate(cfg, args)
        elif args.command == "pretrain":
            _cmd_pretrain(cfg)
        elif args.command == "run":
            res = run_experiment(cfg)
            _print_summary(res.summary)
            print(f"outputs in {cfg.out_dir} (config {res.summary['config_hash']})")
        elif args.command == "sweep":
            kind = _field_types(PipelineConfig).get(args.param) or \
                _field_types(ExperimentConfig).get(args.param)
            if kind is None:
                raise ConfigError(f"unknown sweep parameter {args.param!r}")
            values = [_coerce(args.param, v, kind) for v in args.values.split(",") if v.strip()]
            table = sweep(cfg, args.param, values)
            print(f"{args.param:>12} {'G-mean':>8} {'stderr':>8} {'false alarms':>13}")
            for row in table:
                print(f"{_format_value(row['value']):>12} {row['final_g_mean_mean']:8.4f} "
                      f"{row['final_g_mean_stderr']:8.4f} {row['false_alarms_mean']:13.2f}")
        elif args.command == "evaluate":
            _cmd_evaluate(cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ContractViolation as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
