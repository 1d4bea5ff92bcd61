"""Command line entry point: run, sweep, report, gen-data."""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .harness import (ConfigError, ExperimentConfig, RunFailure, aggregate, build_tasks, emit_plot_data,
                      load_config, load_records, output_root, run_experiment, summarize, sweep_configs,
                      write_summary)
from .strategies import METHODS
from .synth import dump_task

log = logging.getLogger("hybridcl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _method_list(text: str) -> list[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    return methods


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridcl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one sequential-task experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--method")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="run directory (default: <output_dir>/<method>_e<E>_s<seed>)")

    p = sub.add_parser("sweep", help="Cartesian product of methods x epochs x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--epochs", default="1,2,5,10")
    p.add_argument("--seeds", help="defaults to the config's seeds list")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="collect results.json files into the long-format CSV")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="also write mean/min/max across seeds to this CSV")
    p.add_argument("--figures", help="also render AvgWER/BWT figures into this directory")

    p = sub.add_parser("gen-data", help="dump the synthetic task stream, one JSONL file per task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    return parser


def _run_one(config: ExperimentConfig):
    record = run_experiment(config)
    return summarize(record)


def cmd_run(args) -> int:
    config = load_config(args.config)
    overrides = {k: v for k, v in (("global_seed", args.seed), ("method", args.method),
                                   ("epochs_per_task", args.epochs)) if v is not None}
    config = config.replace(**overrides).validate()
    record = run_experiment(config, run_dir=Path(args.out) if args.out else None)
    print(summarize(record))
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    seeds = _int_list(args.seeds) if args.seeds else list(base.seeds)
    configs = sweep_configs(base, _method_list(args.methods), _int_list(args.epochs), seeds)
    log.info("sweep: %d runs into %s", len(configs), output_root(base))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for line in pool.map(_run_one, configs):
                print(line, flush=True)
    else:
        for cfg in configs:
            print(_run_one(cfg), flush=True)
    return EXIT_OK


def cmd_report(args) -> int:
    records = load_records(args.indir)
    if not records:
        log.warning("no results.json found under %s", args.indir)
    n = emit_plot_data(records, args.out)
    print(f"wrote {n} rows from {len(records)} runs to {args.out}")
    if args.summary or args.figures:
        rows = aggregate(records)
        if args.summary:
            write_summary(rows, args.summary)
        if args.figures:
            from .plots import render_figures
            for path in render_figures(rows, args.figures):
                print(f"wrote {path}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for task in build_tasks(config):
        dump_task(task, out / f"task_{task.task_id}.jsonl")
    print(f"wrote {config.num_tasks} task files to {out}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report, "gen-data": cmd_gen_data}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunFailure, OSError, ValueError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
