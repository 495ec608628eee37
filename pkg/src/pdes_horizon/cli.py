"""Command line entry point: ``pdes-horizon run|emit|analyze|params``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import HorizonError, UnknownSelectionError
from .experiment import (
    TASKS,
    ExperimentSpec,
    ResultArchive,
    analyze,
    default_output_dir,
    emit,
    format_report,
    run_experiment,
)
from .model_fits import VARIANTS, FitParams, refit_params

log = logging.getLogger("pdes_horizon")


def _cmd_run(args):
    spec = ExperimentSpec.load(args.spec)
    if args.allow_large:
        spec.allow_large = True
    out = Path(args.out) if args.out else default_output_dir(spec.name)

    def progress(idx, cfg, dt):
        delta = "unconstrained" if cfg.delta is None else f"{cfg.delta:g}"
        log.info("cell %d: L=%d N_V=%d delta=%s done in %.1fs", idx, cfg.L, cfg.n_v, delta, dt)

    archive = run_experiment(spec, out=out, workers=args.workers, progress=progress)
    print(f"{len(archive)} cells written to {out}")
    return 0


def _cmd_emit(args):
    archive = ResultArchive.load(args.archive)
    out = Path(args.out) if args.out else Path(args.archive) / "emit"
    try:
        paths = emit(archive, args.format, out, args.select)
    except UnknownSelectionError as exc:
        print("available tables:", *exc.available, sep="\n  ", file=sys.stderr)
        raise
    for p in paths:
        print(p)
    return 0


def _cmd_analyze(args):
    archive = ResultArchive.load(args.archive)
    report = analyze(archive, args.task, args.tolerance)
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1, default=str) + "\n")
    print(format_report(report))
    return 0 if report["pass"] else 6


def _cmd_params(args):
    if args.refit:
        rows = []
        for line in Path(args.refit).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if parts[0].lower() == "n_v":
                continue
            n_v = float(parts[0])
            delta = None if parts[1].lower() in ("inf", "unconstrained", "none") else float(parts[1])
            rows.append((n_v, delta, *map(float, parts[2:])))
        res = refit_params(rows, FitParams.published(args.variant))
        text = res.params.to_text("refit")
        if args.out:
            Path(args.out).write_text(text)
        print(text, end="")
        print(f"# converged={res.converged} cost={res.cost:.6g} evaluations={res.nfev}")
        return 0 if res.converged else 4
    print(FitParams.published(args.variant).to_text(), end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="pdes-horizon", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment spec (YAML or JSON)")
    r.add_argument("spec")
    r.add_argument("-o", "--out", help="archive directory (default results/<name>)")
    r.add_argument("-j", "--workers", type=int, default=None, help="trial processes")
    r.add_argument("--allow-large", action="store_true", help="ignore the PE-step budget")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("emit", help="export archive tables")
    e.add_argument("archive")
    e.add_argument("--format", choices=("csv", "json"), default="csv")
    e.add_argument("--select", nargs="+", help="table names (summary, c000, ...)")
    e.add_argument("-o", "--out")
    e.set_defaults(func=_cmd_emit)

    a = sub.add_parser("analyze", help="exponents, extrapolation and model checks")
    a.add_argument("archive")
    a.add_argument("--task", choices=TASKS, required=True)
    a.add_argument("--tolerance", type=float)
    a.add_argument("--json", help="also write the machine-readable report here")
    a.set_defaults(func=_cmd_analyze)

    m = sub.add_parser("params", help="show or refit the utilization fit constants")
    g = m.add_mutually_exclusive_group(required=True)
    g.add_argument("--show", action="store_true")
    g.add_argument("--refit", metavar="DATA", help="whitespace table: N_V delta u [stderr]")
    m.add_argument("--variant", choices=VARIANTS, default="four_point")
    m.add_argument("-o", "--out", help="write refitted constants here")
    m.set_defaults(func=_cmd_params)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except HorizonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for item in getattr(exc, "missing", []):
            print(f"  missing: {item}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
