"""Run every desk-scale preset through the stage cache and print the tables.

This is the workload behind acceptance criteria 4-10. With an empty cache
it pretrains five encoders and takes about an hour on one CPU; afterwards it
finishes in seconds. Set SSLMARK_CACHE to pick the cache location.

    python demos/desk_suite.py --out runs/desk --plots
"""
import argparse
import logging
import time
from pathlib import Path

from sslmark import harness


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk", help="directory for per-preset results")
    ap.add_argument("--presets", nargs="*", default=list(harness.PRESETS))
    ap.add_argument("--config", default=None, help="YAML overrides on top of the desk defaults")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--plots", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    overrides = harness.load_config(args.config) if args.config else None
    for name in args.presets:
        t0 = time.perf_counter()
        out = Path(args.out) / name
        table = harness.run_plan(harness.build_preset(name, overrides, out_dir=out), jobs=args.jobs)
        print(f"\n== {name} ({time.perf_counter() - t0:.0f}s) -> {out / 'results.csv'}")
        for r in table.rows:
            print(f"  {r['suspect']:14s} {r['scenario']:5s} {r['params']:12s} acc {r['acc']:.4f}  "
                  f"p {r['p_value']:.3e}  {r['decision']}")
        if args.plots:
            for f in harness.emit_plots(table, out / "plots"):
                print(f"  plot: {f}")


if __name__ == "__main__":
    main()
