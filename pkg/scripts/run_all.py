#!/usr/bin/env python3
"""Run every bundled experiment sequentially and print a summary table.

Results land in runs/<env>/ (curve.csv, summary.json, parameter files, and
a curve.svg learning-curve plot). Expect roughly half an hour in total on a
laptop; pass experiment names to run a subset, e.g.

    python scripts/run_all.py lqr supply_chain
"""

import json
import sys
import time
from pathlib import Path

from cocp.cli import main

ROOT = Path(__file__).resolve().parents[1]
ALL = ("lqr", "box_lqr", "vehicle", "supply_chain", "markowitz")


def run(names):
    results = []
    for name in names:
        config = ROOT / "experiments" / f"{name}.toml"
        print(f"=== {name} ({config}) ===", flush=True)
        start = time.perf_counter()
        rc = main(["tune", str(config)])
        minutes = (time.perf_counter() - start) / 60.0
        if rc != 0:
            print(f"{name}: exited with {rc}", file=sys.stderr)
            return rc
        summary = json.loads((ROOT / "runs" / name / "summary.json").read_text())
        results.append((name, summary, minutes))
    print("\nexperiment        initial      final       best    improvement   minutes")
    for name, s, minutes in results:
        print(
            f"{name:<14} {s['initial_eval_cost']:>10.4f} {s['final_eval_cost']:>10.4f} "
            f"{s['best_eval_cost']:>10.4f} {100 * s['relative_improvement']:>12.1f}% "
            f"{minutes:>8.1f}"
        )
    return 0


if __name__ == "__main__":
    names = sys.argv[1:] or ALL
    unknown = set(names) - set(ALL)
    if unknown:
        print(f"unknown experiments: {sorted(unknown)}", file=sys.stderr)
        sys.exit(2)
    sys.exit(run(names))
