"""Run a configured experiment and print the final-iterate comparison.

    python scripts/run_desk_experiment.py configs/ring8_logistic.json --out runs/ring8
"""
import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

from deepstorm import harness


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", type=Path, nargs="?", default=Path("configs/ring8_logistic.json"))
    ap.add_argument("--out", type=Path, help="output directory (default: output_dir from the config)")
    ap.add_argument("--seeds", type=int, help="override n_seeds")
    ap.add_argument("--iterations", type=int, help="override the horizon K")
    ap.add_argument("--record-every", type=int, help="override record_every")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    spec = harness.parse_config(args.config)
    over = {}
    if args.seeds is not None:
        over["n_seeds"] = args.seeds
    if args.iterations is not None:
        over["iterations"] = args.iterations
    if args.record_every is not None:
        over["record_every"] = args.record_every
    if over:
        spec = dataclasses.replace(spec, **over)
        harness.validate(spec)

    paths = harness.run_experiment(spec, args.out)
    with open(paths["iterations"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    last = {}
    for r in rows:
        last[r["method"]] = r
    cols = ("stationarity_exp", "consensus", "sparsity_pct", "loss")
    print(f"{'method':<10} {'k':>6} " + " ".join(f"{c + '_mean':>22}" for c in cols))
    for name, r in last.items():
        print(f"{name:<10} {r['k']:>6} " + " ".join(f"{float(r[c + '_mean']):>22.6g}" for c in cols))
    print(f"outputs in {paths['iterations'].parent}")
    with open(paths["status"], newline="") as fh:
        return 3 if any(r["status"] != "ok" for r in csv.DictReader(fh)) else 0


if __name__ == "__main__":
    sys.exit(main())
