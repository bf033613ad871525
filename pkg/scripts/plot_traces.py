"""Plot mean +/- std curves from an experiment's summary files (needs matplotlib)."""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = ("stationarity_exp", "consensus", "sparsity_pct", "loss")


def load(path):
    by_method = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_method[row["method"]].append(row)
    return by_method


def plot(summary, x_col, out):
    data = load(summary)
    fig, axes = plt.subplots(1, len(METRICS), figsize=(4 * len(METRICS), 3.2))
    for ax, metric in zip(axes, METRICS):
        for name, rows in data.items():
            x = np.array([float(r[x_col]) for r in rows])
            mu = np.array([float(r[f"{metric}_mean"]) for r in rows])
            sd = np.array([float(r[f"{metric}_std"]) for r in rows])
            ax.plot(x, mu, label=name)
            ax.fill_between(x, np.maximum(mu - sd, 1e-300), mu + sd, alpha=0.2)
        if metric != "sparsity_pct":
            ax.set_yscale("log")
        ax.set_xlabel(x_col)
        ax.set_title(metric)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--out", type=Path, help="image prefix (default: <run_dir>/curves)")
    args = ap.parse_args(argv)
    prefix = args.out or args.run_dir / "curves"
    plot(args.run_dir / "summary_iterations.csv", "k", f"{prefix}_iterations.png")
    plot(args.run_dir / "summary_samples.csv", "samples_used", f"{prefix}_samples.png")
    print(f"wrote {prefix}_iterations.png and {prefix}_samples.png")


if __name__ == "__main__":
    main()
