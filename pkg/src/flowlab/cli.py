"""``lab`` command line: run, validate and plot experiments."""

import argparse
import json
import sys
from pathlib import Path

from .errors import FlowlabError
from .experiments import emit_plot, fixture_names, fixture_path, load_config, run_experiment


def _resolve(path):
    # a bare fixture name also works, e.g. ``lab run convergence_vp_ei``
    p = Path(path)
    if not p.exists() and not p.suffix and path in fixture_names():
        return fixture_path(path)
    return p


def _cmd_run(args):
    path = _resolve(args.config)
    cfg = load_config(path)
    out = Path(args.out or cfg.get("out") or "lab-out")
    report = run_experiment(cfg, out=out, jobs=args.jobs, seed=args.seed, base_dir=path.parent)
    for check in report.checks:
        print(f"{'PASS' if check.passed else 'FAIL'}  {check.name}")
    print(f"{'PASS' if report.passed else 'FAIL'}  {cfg['kind']} ({report.wall_clock:.1f} s) -> {out}")
    return 0 if report.passed else 1


def _cmd_validate(args):
    path = _resolve(args.config)
    load_config(path)
    print(f"{path}: valid")
    return 0


def _cmd_plot(args):
    out = args.out or str(Path(args.metrics).with_name("plot.svg"))
    emit_plot(args.metrics, args.x, args.y, out, group=args.group, log_x=args.log_log, log_y=args.log_log)
    print(out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="lab", description="Deterministic sampler experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", help="config JSON path or the name of a shipped fixture")
    run.add_argument("--out", help="output directory (default: config 'out' or ./lab-out)")
    run.add_argument("--jobs", type=int, default=1, help="worker processes (LAB_JOBS overrides)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.set_defaults(func=_cmd_run)

    val = sub.add_parser("validate", help="check a config against the schema")
    val.add_argument("config")
    val.set_defaults(func=_cmd_validate)

    plot = sub.add_parser("plot", help="render metrics.csv as SVG")
    plot.add_argument("metrics")
    plot.add_argument("--x", required=True)
    plot.add_argument("--y", required=True)
    plot.add_argument("--group")
    plot.add_argument("--log-log", action="store_true")
    plot.add_argument("--out")
    plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FlowlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
