#!/usr/bin/env python3
"""Overlay training curves from one or more trace.csv files (train ELBO per step by epoch)."""
import argparse
import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("traces", nargs="+", help="label=path/to/trace.csv")
    ap.add_argument("--out", default="trace.png")
    ap.add_argument("--validation", action="store_true", help="plot validation ELBO instead")
    args = ap.parse_args()

    key = "val_elbo_per_step" if args.validation else "train_elbo_per_step"
    fig, ax = plt.subplots(figsize=(6, 4))
    for item in args.traces:
        label, _, path = item.rpartition("=")
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        ax.plot([int(r["epoch"]) for r in rows], [float(r[key]) for r in rows], label=label or path)
    ax.set_xlabel("epoch")
    ax.set_ylabel(key.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
