"""Plot training curves and density tables written by ``hjbac``.

Usage::

    python3 scripts/plot_curves.py runs/desk_lqr4 [more run dirs] -o curves.png
    python3 scripts/plot_curves.py --density out/density.csv -o density.png

Needs matplotlib (``pip install .[plot]``).
"""

import argparse
import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return {name: body[:, i] for i, name in enumerate(header)}


def plot_runs(run_dirs, out):
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for run in run_dirs:
        cols = read_columns(os.path.join(run, "training_curve.csv"))
        label = os.path.basename(os.path.normpath(run))
        axes[0].semilogy(cols["iter"], cols["err_v"], label=label)
        axes[1].semilogy(cols["iter"], cols["err_u"], label=label)
    axes[0].set_ylabel("relative L2 error of V")
    axes[1].set_ylabel("relative L2 error of u")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.grid(True, which="both", alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)


def plot_density(path, out):
    cols = read_columns(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(cols["bin_center"], cols["true_density"], label="exact")
    ax.plot(cols["bin_center"], cols["learned_density"], "--", label="learned")
    ax.set_xlabel("V")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("runs", nargs="*", help="run directories containing training_curve.csv")
    p.add_argument("--density", help="density.csv to plot instead of curves")
    p.add_argument("-o", "--out", default="plot.png")
    args = p.parse_args(argv)
    if args.density:
        plot_density(args.density, args.out)
    elif args.runs:
        plot_runs(args.runs, args.out)
    else:
        p.error("give run directories or --density")


if __name__ == "__main__":
    main()
