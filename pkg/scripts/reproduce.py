#!/usr/bin/env python3
"""Run the bundled experiment specs, export CSV and print analysis reports.

    python3 scripts/reproduce.py                 # everything except the big runs
    python3 scripts/reproduce.py kpz_sizes -j 4  # one spec, four worker processes
"""

import argparse
import sys
from pathlib import Path

from pdes_horizon.cli import main as cli

SPECS = Path(__file__).resolve().parent / "specs"

# spec name -> analysis tasks worth running on its archive
TASKS = {
    "smoke": [],
    "zero_window": [],
    "rd_limit": ["exponents"],
    "kpz_growth": ["exponents"],
    "slow_fast": [],
    "mean_field": ["meanfield"],
    "kpz_sizes": ["extrapolate", "exponents"],
    "window_grid": ["composite-fit"],
}
BIG = {"kpz_sizes", "window_grid"}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("names", nargs="*", help=f"specs to run (default: all but {sorted(BIG)})")
    p.add_argument("-o", "--out", default="results", help="parent directory for archives")
    p.add_argument("-j", "--workers", type=int, default=1)
    args = p.parse_args(argv)

    names = args.names or [n for n in TASKS if n not in BIG]
    unknown = [n for n in names if not (SPECS / f"{n}.yaml").exists()]
    if unknown:
        p.error(f"no such spec: {', '.join(unknown)}")
    worst = 0
    for name in names:
        archive = Path(args.out) / name
        print(f"== {name}", flush=True)
        code = cli(["run", str(SPECS / f"{name}.yaml"), "-o", str(archive), "-j", str(args.workers)])
        if code:
            return code
        cli(["emit", str(archive), "--format", "csv", "-o", str(archive / "csv")])
        for task in TASKS.get(name, []):
            worst = max(worst, cli(["analyze", str(archive), "--task", task,
                                    "--json", str(archive / f"{task}.json")]))
    return worst


if __name__ == "__main__":
    sys.exit(main())
