#!/usr/bin/env python3
"""Plot reconstruction bands written by `d2pcca reconstruct`.

One panel per column: the observed series, the reconstruction mean, and the
shaded mean +- 1.96 sd band. Values are in normalized window units.
"""
import argparse
import csv
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_bands(path):
    series = defaultdict(lambda: defaultdict(list))
    sets = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            col = row["column"]
            sets[col] = row["set"]
            for key in ("step", "truth", "mean", "lower", "upper"):
                series[col][key].append(float(row[key]))
    return series, sets


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("bands", help="bands.csv from d2pcca reconstruct")
    ap.add_argument("--out", default="bands.png")
    ap.add_argument("--columns", nargs="*", help="subset of columns to draw (default: all)")
    ap.add_argument("--ncols", type=int, default=5)
    args = ap.parse_args()

    series, sets = read_bands(args.bands)
    columns = args.columns or list(series)
    missing = [c for c in columns if c not in series]
    if missing:
        raise SystemExit(f"columns not in {args.bands}: {', '.join(missing)}")
    ncols = min(args.ncols, len(columns))
    nrows = (len(columns) + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.4 * nrows), squeeze=False, sharex=True)
    for ax, col in zip(axes.flat, columns):
        s = series[col]
        ax.fill_between(s["step"], s["lower"], s["upper"], alpha=0.3, label="95% band")
        ax.plot(s["step"], s["truth"], "k.-", lw=1, ms=3, label="observed")
        ax.plot(s["step"], s["mean"], lw=1.5, label="reconstruction")
        ax.set_title(f"{col} ({sets[col]})", fontsize=9)
    for ax in list(axes.flat)[len(columns):]:
        ax.axis("off")
    axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
