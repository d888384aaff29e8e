#!/usr/bin/env python3
"""Sweep worker counts through the analytical model and plot-ready CSV.

Reproduces the runtime-vs-cost tradeoff shape: adding workers first speeds
both platforms up, then the curves flatten while dollar cost keeps climbing.

Usage:
    python scripts/tradeoff_sweep.py --out sweep.csv
    python scripts/tradeoff_sweep.py --dataset-mb 8000 --model-mb 0.000224 \
        --epochs 10 --compute-epoch 120
"""

import argparse
import sys

from faasml.costmodel import CostModelParams, sweep, sweep_csv


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dataset-mb", type=float, default=8000.0)
    parser.add_argument("--model-mb", type=float, default=224e-6)
    parser.add_argument("--epochs", type=float, default=10.0)
    parser.add_argument("--compute-epoch", type=float, default=120.0,
                        help="single-worker seconds per epoch")
    parser.add_argument("--workers", default="1,2,5,10,20,50,100,200")
    parser.add_argument("--out", help="CSV path (default: stdout)")
    args = parser.parse_args()

    p = CostModelParams(dataset_mb=args.dataset_mb, model_mb=args.model_mb,
                        epochs_faas=args.epochs, epochs_iaas=args.epochs,
                        compute_epoch_faas=args.compute_epoch,
                        compute_epoch_iaas=args.compute_epoch)
    w_values = [int(w) for w in args.workers.split(",")]
    rows = sweep(p, w_values)
    csv = sweep_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
        print(f"wrote {args.out} ({len(rows)} rows)")
    else:
        sys.stdout.write(csv)

    fastest = {}
    cheapest = {}
    for r in rows:
        if r.config not in fastest or \
                r.breakdown.total_s < fastest[r.config].breakdown.total_s:
            fastest[r.config] = r
        if r.config not in cheapest or r.cost_usd < cheapest[r.config].cost_usd:
            cheapest[r.config] = r
    print("\nbest points per config:", file=sys.stderr)
    for name in fastest:
        f, c = fastest[name], cheapest[name]
        print(f"  {name:10s} fastest: w={f.workers:4d} {f.breakdown.total_s:9.1f}s "
              f"${f.cost_usd:.4f} | cheapest: w={c.workers:4d} "
              f"{c.breakdown.total_s:9.1f}s ${c.cost_usd:.4f}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
