"""Command line interface.

``pmedn run``        run the configured stages
``pmedn verify``     run the invariant suite (``--strict``: exit 4 on failure)
``pmedn plot-data``  CSV/TSV plot data and PNG figures from a report

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 failed
invariant check under ``verify --strict``.
"""

import argparse
import logging
import sys

import numpy as np

from .config import ConfigError, resolve
from .elliptic import EllipticSolveError
from .expansion import FitError
from .forward import ForwardError
from .inverse import InverseError
from .laplace import TransformError
from .pipeline import StageError, run
from .plots import PlotDataError, emit_plots

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_INVARIANT = 0, 2, 3, 4

NUMERICAL = (ForwardError, EllipticSolveError, TransformError, FitError, InverseError,
             np.linalg.LinAlgError, FloatingPointError, ArithmeticError)

log = logging.getLogger("pmedn")


def _overrides(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="pmedn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="INI configuration file")
        sp.add_argument("--jobs", type=int, metavar="N", help="parallel pipeline runs")
        sp.add_argument("--seed", type=int, metavar="N", help="noise seed")
        sp.add_argument("--output", metavar="DIR", help="output directory")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a configuration value (repeatable)")

    r = sub.add_parser("run", help="run pipeline stages")
    common(r)
    r.add_argument("--stage", metavar="LIST",
                   help="comma separated: forward, transform, fit, recon-gamma, recon-eps, verify, all")
    v = sub.add_parser("verify", help="run the invariant suite")
    common(v)
    v.add_argument("--strict", action="store_true", help="exit 4 if any strict check fails")
    d = sub.add_parser("plot-data", help="write plot data and figures from a report")
    d.add_argument("--report", metavar="PATH", required=True, help="report.json or its directory")
    d.add_argument("--select", metavar="LIST", default="",
                   help="comma separated: remainder, reconstruction, fit, all (empty: nothing)")
    d.add_argument("--output", metavar="DIR", help="destination (default <run>/plots)")
    d.add_argument("--no-png", action="store_true", help="data files only")
    return p


def _print_report(report, out=sys.stdout):
    for name, c in report["checks"].items():
        verdict = "PASS" if c["pass"] else ("FAIL" if c["strict"] else "note")
        print(f"{verdict:4s}  {name}: {c['value']:.3e} (limit {c['limit']:.1e})", file=out)
    for name, val in report["errors"].items():
        print(f"error {name} = {val:.4g}" if val is not None else f"error {name} = nan", file=out)


def _execute(args, stages):
    overrides = _overrides(args.set)
    if stages is not None:
        overrides["run.stages"] = stages
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.jobs is not None:
        overrides["run.jobs"] = args.jobs
    if args.output is not None:
        overrides["run.output"] = args.output
    cfg, parser = resolve(args.config, overrides=overrides)
    report = run(cfg, parser)
    _print_report(report)
    print(f"report: {cfg.output}/report.json")
    return report


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot-data":
            manifest = emit_plots(args.report, args.select, args.output, png=not args.no_png)
            for sel, files in manifest.items():
                for f in files:
                    print(f"{sel}: {f}")
            return EXIT_OK
        if args.command == "run":
            _execute(args, args.stage)
            return EXIT_OK
        report = _execute(args, "verify")
        if args.strict and not report["all_strict_checks_pass"]:
            print("strict invariant check failed", file=sys.stderr)
            return EXIT_INVARIANT
        return EXIT_OK
    except StageError as exc:
        print(f"pmedn: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.original, NUMERICAL) else EXIT_INVALID
    except (ConfigError, PlotDataError, ValueError, OSError) as exc:
        print(f"pmedn: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
