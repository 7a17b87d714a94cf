"""Command-line driver: ``qrt {train,sweep,compare,curves,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import SYNTH_KINDS, DataError, save_table, synth
from .experiment import (
    ConfigError,
    compare_results,
    curves_csv,
    dumps,
    expand_methods,
    load_config,
    read_results,
    run_one,
    sweep,
    write_atomic,
    write_result,
)
from .training import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4



def _methods(cfg, names):
    if not names:
        return cfg.methods
    by_name = {m.name: m for m in cfg.methods}
    try:
        specs = expand_methods(names)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    out = []
    for spec in specs:
        out.append(by_name.get(spec.name, spec))
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    spec = _methods(cfg, [args.method])[0]
    datasets = [cfg.dataset(args.dataset)] if args.dataset else cfg.datasets
    for d in datasets:
        X, y = d.load()
        record = run_one(X, y, d.name, spec, cfg.model, args.seed, cfg.metrics, cfg.train_cap)
        path = write_result(args.out or cfg.output_dir, record)
        print(path)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output_dir = args.out
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    paths = sweep(cfg, methods=_methods(cfg, args.methods), seeds=seeds, jobs=args.jobs, force=args.force)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_compare(args) -> int:
    out = Path(args.out or args.results)
    for metric in args.metrics.split(","):
        report, tables = compare_results(args.results, metric, args.baseline, args.alpha)
        write_atomic(out / f"comparison_{metric}.json", dumps(report.to_dict()))
        for name, text in tables.items():
            write_atomic(out / name, text)
        print(out / f"comparison_{metric}.json")
    return EXIT_OK


def cmd_curves(args) -> int:
    methods = args.methods.split(",") if args.methods else None
    text = curves_csv(read_results(args.results), args.dataset, methods)
    out = Path(args.out) if args.out else Path(args.results) / f"curves_{args.dataset}.csv"
    write_atomic(out, text)
    print(out)
    return EXIT_OK


def cmd_synth(args) -> int:
    X, y = synth(args.kind, args.n, args.seed, args.features)
    header = [f"x{i}" for i in range(X.shape[1])] + ["y"] if args.header else None
    save_table(args.out, X, y, header)
    print(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrt", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one method for one seed")
    t.add_argument("config")
    t.add_argument("--method", required=True, help="method name or preset (e.g. QRTC)")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--dataset", help="restrict to one dataset of the config")
    t.add_argument("--out", help="result directory (defaults to the config's output_dir)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="run datasets x methods x seeds")
    s.add_argument("config")
    s.add_argument("--methods", help="comma list of names or presets; ALL, TABLE1 expand")
    s.add_argument("--seeds", help="comma list overriding the config seeds")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--force", action="store_true", help="recompute existing results")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="statistics over a result directory")
    c.add_argument("results")
    c.add_argument("--metrics", default="nll,pce,crps")
    c.add_argument("--baseline", default="BASE")
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("curves", help="per-epoch curves as tidy CSV")
    v.add_argument("results")
    v.add_argument("--dataset", required=True)
    v.add_argument("--methods")
    v.add_argument("--out")
    v.set_defaults(func=cmd_curves)

    y = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    y.add_argument("--kind", choices=SYNTH_KINDS, required=True)
    y.add_argument("--n", type=int, default=5000)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--features", type=int, default=4)
    y.add_argument("--header", action="store_true")
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, ArithmeticError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
