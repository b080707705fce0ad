"""Command-line entry point: run, group, plot, gradcheck and demo verbs."""
from __future__ import annotations

import argparse
import logging
import sys
import tempfile
from pathlib import Path

import yaml

from ..numerics import gradcheck
from .config import ConfigError, parse_config, parse_config_text
from .run import (
    GroupFailure,
    PlotDataError,
    RunFailure,
    emit_plot_data,
    load_record,
    run_experiment,
    run_group,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4

DEMO_CONFIG = """\
method: proto
dataset:
  kind: glyphs
  samples_per_class: 24
n_way_train: 5
n_way_eval: 5
k_shot: 1
epochs: 2
episodes_per_epoch: 50
n_val_tasks: 20
n_eval_tasks: 100
"""


def _summary(record) -> str:
    ev = record.evaluation
    if "formatted" in ev:
        return f"{record.run_id}: {ev['method']} accuracy {ev['formatted']} over {ev['n_tasks']} tasks"
    return f"{record.run_id}: {ev.get('method')} " + ", ".join(
        f"{k}={v:.4f}" for k, v in ev.items() if isinstance(v, float)
    )


def cmd_run(args, extra) -> int:
    cfg = parse_config(args.config, extra)
    record = run_experiment(cfg, args.output_dir)
    print(_summary(record))
    print(f"artifacts in {Path(record.paths['config.echo']).parent}")
    return EXIT_OK


def cmd_group(args, extra) -> int:
    cfg = parse_config(args.config, extra)
    values = [yaml.safe_load(v) for v in args.values.split(",")]
    results = run_group(cfg, args.axis, values, args.output_dir)
    failed = 0
    for value, res in zip(values, results):
        if isinstance(res, GroupFailure):
            failed += 1
            print(f"{args.axis}={value}: FAILED {res.error}")
        else:
            print(f"{args.axis}={value}: {_summary(res)}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_plot(args, extra) -> int:
    records = [load_record(d) for d in args.records]
    table = emit_plot_data(records, args.x, args.out)
    if args.out is None:
        sys.stdout.write(table)
    else:
        print(f"wrote {len(records)} rows to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    return gradcheck.main(args.seeds)


def cmd_demo(args, extra) -> int:
    out = args.output_dir or tempfile.mkdtemp(prefix="fewshot-demo-")
    cfg = parse_config_text(DEMO_CONFIG, extra)
    record = run_experiment(cfg, out)
    print(_summary(record))
    print(f"artifacts in {Path(record.paths['config.echo']).parent}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewshot", description="Few-shot learning experiments on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one experiment; extra --key value pairs override the file")
    p.add_argument("config", type=Path)
    p.add_argument("--output-dir", default=None, help="overrides output_dir without changing the run id")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("group", help="one run per value of a config key, sharing evaluation tasks")
    p.add_argument("config", type=Path)
    p.add_argument("--axis", required=True, help="config key, e.g. m_swaps_eval or dataset.seed")
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 0,3,6,10")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("plot", help="emit an x,mean,ci95,method,config_hash table from run directories")
    p.add_argument("records", nargs="+", type=Path)
    p.add_argument("--x", required=True, help="config key for the x column")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable operation")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo", help="short 5-way 1-shot prototypical network run on glyphs")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.verb not in ("run", "group", "demo"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, extra)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PlotDataError as exc:
        print(f"plot error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except RunFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
