#!/usr/bin/env python3
"""Held-out LDA toy document runs (EP-twisted vs plain RB-SMC) plus a summary table.

Writes results/lda_toy.results.csv, its .meta.json sidecar, and a summary;
the frontend's `plot` command consumes the pair directly.
"""

import pathlib
import sys

from twistsmc import cli

HERE = pathlib.Path(__file__).resolve().parent
OUT = HERE.parent / "results"


def main():
    cfg = cli.load_config(HERE / "configs" / "lda_toy.json")
    OUT.mkdir(exist_ok=True)
    results, meta = cli.run_experiment(cfg, OUT / "lda_toy.results.csv", jobs=1)
    rows = cli.summarize(results, OUT / "lda_toy.summary.csv")
    print(f"results: {results}\nmeta:    {meta}")
    for row in rows:
        print(f"  {row['method']:>10} N={row['N']:<5} mean={float(row['mean']):.3f} "
              f"stdev={float(row['stdev']):.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
