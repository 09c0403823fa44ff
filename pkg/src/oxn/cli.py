"""Command line: ``oxn run | validate | plot | report``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from oxn import __version__


def _run(args) -> int:
    from oxn.report import format_summary, run_experiment
    from oxn.sim.topology import SimTopology

    topology = SimTopology.load(args.topology) if args.topology else None
    result = run_experiment(args.file, backend=args.backend, seed=args.seed, out=args.out, run_id=args.run_id,
                            prometheus_url=args.prometheus_url, jaeger_url=args.jaeger_url, topology=topology)
    print(format_summary(result.report))
    print(f"report: {result.run_dir / 'report.json'}")
    if args.plots and result.report.get("manifest"):
        from oxn.plots import render_plots

        for p in render_plots(result.run_dir):
            print(f"plot: {p}")
    return result.exit_code


def _validate(args) -> int:
    from oxn.config import ConfigError, SchemaError, ValidationFailed, load_experiment

    try:
        load_experiment(args.file)
    except ValidationFailed as exc:
        print(exc.report)
        return 1
    except SchemaError as exc:
        for path, msg in exc.errors:
            print(f"{path}: {msg}" if path else msg)
        return 1
    except (ConfigError, OSError) as exc:
        print(exc)
        return 1
    print("OK")
    return 0


def _plot(args) -> int:
    from oxn.plots import render_plots

    try:
        paths = render_plots(args.run_dir)
    except OSError as exc:
        print(f"cannot read run directory: {exc}", file=sys.stderr)
        return 4
    for p in paths:
        print(p)
    return 0


def _report(args) -> int:
    from oxn.report import format_summary, load_report

    try:
        report = load_report(args.run_dir)
    except (OSError, ValueError) as exc:
        print(f"cannot read report: {exc}", file=sys.stderr)
        return 4
    print(format_summary(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oxn", description="Run observability experiments.")
    p.add_argument("--version", action="version", version=f"oxn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute an experiment file")
    r.add_argument("file", type=Path)
    r.add_argument("--backend", choices=("sim", "container"), default="sim")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", type=Path, default=Path(os.environ.get("OXN_OUT", "runs")),
                   help="output root (default: $OXN_OUT or ./runs)")
    r.add_argument("--run-id", help="run directory name (default: generated)")
    r.add_argument("--prometheus-url", help="metric backend for the container backend")
    r.add_argument("--jaeger-url", help="trace backend for the container backend")
    r.add_argument("--topology", type=Path, help="JSON topology overriding the compose x-sim settings")
    r.add_argument("--plots", action="store_true", help="render SVG plots after the run")
    r.set_defaults(func=_run)

    v = sub.add_parser("validate", help="check an experiment file without running it")
    v.add_argument("file", type=Path)
    v.set_defaults(func=_validate)

    pl = sub.add_parser("plot", help="render SVG plots for a run directory")
    pl.add_argument("run_dir", type=Path)
    pl.set_defaults(func=_plot)

    rp = sub.add_parser("report", help="print the summary of a finished run")
    rp.add_argument("run_dir", type=Path)
    rp.set_defaults(func=_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
