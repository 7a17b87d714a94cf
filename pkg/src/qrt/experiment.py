"""Experiment configuration, single runs, sweeps and result-file readers."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import stats
from .data import DEFAULT_TRAIN_CAP, DataError, load_table, split, synth, SYNTH_KINDS
from .mdn import MdnConfig, MixtureDensityNetwork
from .metrics import evaluate
from .training import (
    PRESET_NAMES,
    MethodSpec,
    Partitions,
    posthoc_recalibrate,
    preset,
    select_bandwidth,
    select_lambda,
    train,
    validation_crps_pce,
)

SCHEMA_VERSION = 1
METRICS = ("nll", "pce", "crps", "sd")
TABLE1 = ("BASE", "QRC", "QREG", "QREGC", "QRT", "QRTC")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# -- configuration --------------------------------------------------------------

@dataclass
class DatasetSpec:
    name: str
    path: str | None = None
    synth: str | None = None
    n: int = 5000
    seed: int = 0
    n_features: int = 4
    header: bool | None = None

    def load(self):
        if self.path is not None:
            return load_table(self.path, header=self.header)
        return synth(self.synth, self.n, self.seed, self.n_features)


@dataclass
class ExperimentConfig:
    datasets: list
    methods: list
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    model: dict = field(default_factory=dict)
    metrics: tuple = METRICS
    output_dir: str = "results"
    train_cap: int | None = DEFAULT_TRAIN_CAP

    def method(self, name: str) -> MethodSpec:
        for m in self.methods:
            if m.name == name:
                return m
        raise ConfigError(f"method {name!r} not in config; have {[m.name for m in self.methods]}")

    def dataset(self, name: str) -> DatasetSpec:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"dataset {name!r} not in config; have {[d.name for d in self.datasets]}")


def expand_methods(names, defaults: dict | None = None) -> list[MethodSpec]:
    """Expand method names; ``ALL`` gives every preset, ``TABLE1`` the six main rows."""
    if isinstance(names, str):
        names = [n.strip() for n in names.split(",") if n.strip()]
    out = []
    for name in names:
        key = name.upper()
        group = PRESET_NAMES if key == "ALL" else TABLE1 if key == "TABLE1" else (key,)
        out.extend(preset(g, **(defaults or {})) for g in group)
    return out


def _method_from_table(i: int, entry, defaults: dict) -> MethodSpec:
    where = f"methods[{i}]"
    if isinstance(entry, str):
        entry = {"preset": entry}
    if not isinstance(entry, dict):
        raise ConfigError(f"{where}: expected a preset name or a table")
    entry = dict(entry)
    base = entry.pop("preset", None)
    kwargs = {**defaults, **entry}
    try:
        if base is not None:
            name = kwargs.pop("name", None)
            spec = preset(base, **kwargs)
            if name:
                spec.name = name
        else:
            spec = MethodSpec(**kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    if spec.batch_size < 2 or spec.patience < 1 or spec.max_epochs < 1:
        raise ConfigError(f"{where}: batch_size >= 2, patience >= 1 and max_epochs >= 1 required")
    for b in spec.bandwidth_candidates + spec.posthoc_bandwidths:
        if not b > 0:
            raise ConfigError(f"{where}.bandwidth: must be positive, got {b}")
    return spec


def parse_config(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    known = {"datasets", "methods", "method_defaults", "seeds", "model", "metrics", "output_dir", "train_cap"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if not data.get("datasets"):
        raise ConfigError("datasets: at least one [[datasets]] table is required")
    datasets = []
    for i, d in enumerate(data["datasets"]):
        where = f"datasets[{i}]"
        if not isinstance(d, dict) or "name" not in d:
            raise ConfigError(f"{where}: a table with a 'name' is required")
        if ("path" in d) == ("synth" in d):
            raise ConfigError(f"{where}: give exactly one of 'path' or 'synth'")
        if "synth" in d and d["synth"] not in SYNTH_KINDS:
            raise ConfigError(f"{where}.synth: unknown kind {d['synth']!r}; choose from {SYNTH_KINDS}")
        try:
            spec = DatasetSpec(**d)
        except TypeError as exc:
            raise ConfigError(f"{where}: {exc}") from exc
        if spec.path is not None and base_dir is not None and not os.path.isabs(spec.path):
            spec.path = str(base_dir / spec.path)
        datasets.append(spec)
    defaults = data.get("method_defaults", {})
    methods = [_method_from_table(i, m, defaults) for i, m in enumerate(data.get("methods", ["BASE", "QRTC"]))]
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ConfigError(f"methods: names must be unique, got {names}")
    if len({d.name for d in datasets}) != len(datasets):
        raise ConfigError("datasets: names must be unique")
    seeds = data.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: a non-empty list of integers is required")
    metrics = tuple(data.get("metrics", METRICS))
    bad = set(metrics) - set(METRICS)
    if bad:
        raise ConfigError(f"metrics: unknown {sorted(bad)}; choose from {METRICS}")
    model = data.get("model", {})
    try:
        MdnConfig(input_dim=1, **model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc
    return ExperimentConfig(
        datasets=datasets, methods=methods, seeds=seeds, model=model, metrics=metrics,
        output_dir=data.get("output_dir", "results"), train_cap=data.get("train_cap", DEFAULT_TRAIN_CAP),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        cfg = parse_config(data, path.parent)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not os.path.isabs(cfg.output_dir):
        cfg.output_dir = str(path.parent / cfg.output_dir)
    return cfg


# -- one run --------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _metrics(dist, y, scale, metrics) -> dict:
    report = evaluate(dist, y, target_scale=scale, with_crps="crps" in metrics)
    out = report.to_dict()
    if "sd" not in metrics:
        out["sd"] = None
    return out


def _train_key(spec: MethodSpec, alpha, bandwidth, config: MdnConfig):
    opt = (spec.batch_size, spec.learning_rate, spec.max_epochs, spec.patience, spec.seed,
           spec.folds_calibration, spec.should_drop_last)
    if alpha == 0:
        return ("nll", opt, config)
    return (alpha, bandwidth, spec.regularizer, spec.ablation, spec.map_source, spec.map_size, opt, config)


def run_one(X, y, dataset: str, spec: MethodSpec, model: dict, seed: int,
            metrics=METRICS, train_cap: int | None = DEFAULT_TRAIN_CAP, cache: dict | None = None) -> dict:
    """Train, select hyperparameters and score one (dataset, method, seed) cell.

    ``cache`` shares trained models between methods of the same cell (for
    instance the plain-NLL model behind QRC and the lambda = 0 QREG candidate).
    """
    t_start = time.perf_counter()
    spec = replace(spec, seed=seed)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    splits = split(len(y), seed, spec.folds_calibration, train_cap)
    splits.fit_standardization(X, y)
    parts = Partitions.from_splits(X, y, splits)
    config = MdnConfig(input_dim=X.shape[1], **model)
    cache = {} if cache is None else cache

    def fit(alpha, bandwidth):
        key = (dataset, _train_key(spec, alpha, bandwidth, config))
        if key not in cache:
            t0 = time.perf_counter()
            m, h = train(config, spec, parts, bandwidth=bandwidth, alpha=alpha)
            cache[key] = (m.params.state_dict(), h, time.perf_counter() - t0)
        state, h, seconds = cache[key]
        m = MixtureDensityNetwork(config, seed=seed)
        m.params.load_state_dict(state)
        return m, h, seconds

    candidates = []
    lambdas = spec.lambdas if spec.tuned else (None,)
    for lam in lambdas:
        alpha = spec.alpha if lam is None else (-lam if lam else 0.0)
        bws = spec.bandwidth_candidates if alpha != 0 else (None,)
        runs = {}
        for b in bws:
            m, h, seconds = fit(alpha, b)
            runs[b] = (m, h, seconds, float(np.min(h.val_nll)))
        best_b = bws[0] if len(bws) == 1 else select_bandwidth(bws, {b: r[3] for b, r in runs.items()})
        m, h, seconds, vnll = runs[best_b]
        entry = {"lambda": lam, "alpha": alpha, "bandwidth": best_b, "val_nll": vnll,
                 "selected_epoch": h.selected_epoch, "train_seconds": seconds,
                 "bandwidth_scores": {str(b): r[3] for b, r in runs.items()} if len(bws) > 1 else None}
        if spec.tuned:
            entry["val_crps"], entry["val_pce"] = validation_crps_pce(m, parts)
        candidates.append((entry, m, h))

    if spec.tuned:
        lam = select_lambda({e["lambda"]: (e["val_crps"], e["val_pce"]) for e, _, _ in candidates})
        chosen = next(c for c in candidates if c[0]["lambda"] == lam)
    else:
        chosen = candidates[0]
    entry, model_fit, history = chosen

    scale = splits.y_sd
    base_test = model_fit.forward(parts.X_test)
    record = {
        "schema": SCHEMA_VERSION,
        "dataset": dataset,
        "method": spec.name,
        "seed": seed,
        "method_spec": spec.to_dict(),
        "model": asdict(config),
        "selected": {"alpha": entry["alpha"], "bandwidth": entry["bandwidth"], "lambda": entry["lambda"],
                     "epoch": history.selected_epoch},
        "candidates": [c[0] for c in candidates],
        "history": history.to_dict(),
        "splits": splits.manifest(),
        "metrics_base": _metrics(base_test, parts.y_test, scale, metrics),
    }
    if spec.posthoc:
        scores = {}
        for pb in spec.posthoc_bandwidths if spec.posthoc_kind.smooth else (None,):
            rec = posthoc_recalibrate(model_fit, parts.X_cal, parts.y_cal, spec.posthoc_kind, pb)
            scores[pb] = float(-np.mean(rec.log_pdf(parts.X_val, parts.y_val))) if pb else 0.0
        pb = select_bandwidth(list(scores), scores) if spec.posthoc_kind.smooth else None
        rec = posthoc_recalibrate(model_fit, parts.X_cal, parts.y_cal, spec.posthoc_kind, pb)
        record["selected"]["posthoc_bandwidth"] = pb
        record["posthoc"] = {
            "kind": spec.posthoc_kind.value,
            "bandwidth": pb,
            "val_nll_by_bandwidth": {str(k): v for k, v in scores.items()},
            "n_centers": rec.map.n,
        }
        record["metrics_posthoc"] = _metrics(rec.distribution(parts.X_test), parts.y_test, scale, metrics)
        record["metrics"] = record["metrics_posthoc"]
    else:
        record["metrics"] = record["metrics_base"]
    record["counters"] = {
        "kernel_evals_per_batch": history.kernel_evals_per_batch,
        "model_rows_per_step": history.model_rows_per_step,
        "steps": history.steps,
        "n_parameters": history.n_parameters,
    }
    record["timing"] = {
        "total_seconds": time.perf_counter() - t_start,
        "train_seconds": sum(c[0]["train_seconds"] for c in candidates),
        "epoch_seconds_mean": float(np.mean(history.epoch_time)),
        "epoch_seconds_median": float(np.median(history.epoch_time)),
    }
    return _clean(record)


# -- files ----------------------------------------------------------------------

def dumps(record: dict) -> str:
    return json.dumps(record, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_atomic(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def result_path(out_dir, dataset: str, method: str, seed: int) -> Path:
    return Path(out_dir) / dataset / method / f"seed{seed}.json"


def write_result(out_dir, record: dict) -> Path:
    path = result_path(out_dir, record["dataset"], record["method"], record["seed"])
    write_atomic(path, dumps(record))
    return path


def read_results(out_dir) -> list[dict]:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        raise DataError(f"{out_dir}: no such result directory")
    records = []
    for p in sorted(out_dir.glob("*/*/seed*.json")):
        with open(p, encoding="utf-8") as fh:
            records.append(json.load(fh))
    return records


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)  # RFC-4180 quoting, CRLF line ends
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# -- sweep ----------------------------------------------------------------------

def _cell_job(args):
    dataset, methods, model, seed, metrics, train_cap, out_dir = args
    X, y = dataset.load()
    cache = {}
    paths = []
    for spec in methods:
        record = run_one(X, y, dataset.name, spec, model, seed, metrics, train_cap, cache)
        paths.append(str(write_result(out_dir, record)))
    return paths


def sweep(config: ExperimentConfig, methods=None, datasets=None, seeds=None, jobs: int = 1,
          force: bool = False) -> list[str]:
    """Run every (dataset, seed) cell; methods of one cell share one process and cache."""
    methods = methods or config.methods
    datasets = datasets or config.datasets
    seeds = seeds if seeds is not None else config.seeds
    tasks = []
    for d in datasets:
        for s in seeds:
            todo = [m for m in methods
                    if force or not result_path(config.output_dir, d.name, m.name, s).exists()]
            if todo:
                tasks.append((d, todo, config.model, s, config.metrics, config.train_cap, config.output_dir))
    if jobs <= 1:
        results = [_cell_job(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_job, tasks))
    return [p for r in results for p in r]


# -- comparison and curves ------------------------------------------------------

def result_matrix(records, metric: str) -> dict:
    out: dict = {}
    for r in records:
        value = r["metrics"].get(metric)
        if value is None:
            continue
        out.setdefault(r["dataset"], {}).setdefault(r["method"], []).append(value)
    return out


def compare_results(out_dir, metric: str = "nll", baseline: str = "BASE", alpha: float = 0.05):
    """Comparison report plus CSV tables (name -> text) for one metric."""
    records = read_results(out_dir)
    matrix = result_matrix(records, metric)
    report = stats.compare(matrix, metric, baseline, alpha)
    tables = {
        f"cohens_d_{metric}.csv": csv_text(
            ["dataset", "method", "cohens_d"],
            [[d, m, report.cohens_d[m][d]] for m in sorted(report.cohens_d) for d in report.datasets]),
        f"letter_values_{metric}.csv": csv_text(
            ["method", "level", "value"],
            [[m, k[1:], v] for m in sorted(report.letter_values) for k, v in report.letter_values[m].items()]),
        f"ranks_{metric}.csv": csv_text(
            ["method", "average_rank"], [[m, report.average_ranks[m]] for m in report.methods]),
        f"pairwise_{metric}.csv": csv_text(
            ["method_a", "method_b", "statistic", "p_value", "p_adjusted", "significant"],
            [[p.method_a, p.method_b, p.statistic, p.p_value, p.p_adjusted, p.significant]
             for p in report.pairwise]),
    }
    return report, tables


CURVE_METRICS = ("train_nll", "val_nll", "val_pce")


def curve_rows(records, dataset: str, methods=None) -> list[list]:
    """Tidy rows ``epoch, seed, method, metric, value`` plus selected-epoch markers."""
    rows, markers = [], []
    for r in sorted(records, key=lambda r: (r["method"], r["seed"])):
        if r["dataset"] != dataset or (methods and r["method"] not in methods):
            continue
        h = r["history"]
        for metric in CURVE_METRICS:
            for epoch, v in enumerate(h[metric]):
                rows.append([epoch, r["seed"], r["method"], metric, v])
        markers.append([h["selected_epoch"], r["seed"], r["method"], "selected_epoch", h["selected_epoch"]])
    return rows + markers


def curves_csv(records, dataset: str, methods=None) -> str:
    return csv_text(["epoch", "seed", "method", "metric", "value"], curve_rows(records, dataset, methods))


def mean_curve(rows, method: str, metric: str) -> np.ndarray:
    """Seed-averaged curve; epoch ``e`` averages the seeds that reached it."""
    by_epoch: dict = {}
    for epoch, _, m, name, v in rows:
        if m == method and name == metric and v not in (None, ""):
            by_epoch.setdefault(int(epoch), []).append(float(v))
    return np.array([np.mean(by_epoch[e]) for e in sorted(by_epoch)])


__all__ = [
    "ConfigError", "DatasetSpec", "ExperimentConfig", "expand_methods", "parse_config", "load_config",
    "run_one", "dumps", "write_atomic", "write_result", "read_results", "result_path", "csv_text",
    "read_csv", "sweep", "result_matrix", "compare_results", "curve_rows", "curves_csv", "mean_curve",
]
