#!/usr/bin/env python3
"""Log-log rank/frequency plot from a table written by `pointer-sentinel analyze --zipf`."""
import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from pointer_sentinel.analysis import read_table


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("table")
    parser.add_argument("--out", default="zipf.png")
    args = parser.parse_args()
    rows = read_table(args.table)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog([r["rank"] for r in rows], [r["frequency"] for r in rows], ".", ms=3)
    ax.set_xlabel("rank")
    ax.set_ylabel("frequency")
    fig.tight_layout()
    fig.savefig(args.out)
    print(args.out)


if __name__ == "__main__":
    main()
