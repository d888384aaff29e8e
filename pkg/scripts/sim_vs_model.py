#!/usr/bin/env python3
"""Compare simulate-mode job totals against the analytical model.

Runs full-batch distributed SGD jobs (one synchronization round per epoch, so
the model's per-epoch communication term lines up with the protocol) across
epoch budgets and channels, then prints simulated vs modeled totals and their
relative gap.

Usage:
    python scripts/sim_vs_model.py --workers 10 --epochs 5,10,20,50
"""

import argparse
import sys

from faasml.costmodel import CostModelParams, faas_time
from faasml.runtime import DatasetSpec, JobConfig, run_job


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workers", type=int, default=10)
    parser.add_argument("--epochs", default="5,10,20,50")
    parser.add_argument("--channels", default="s3,elasticache_t3")
    parser.add_argument("--rows", type=int, default=2000)
    parser.add_argument("--features", type=int, default=10)
    parser.add_argument("--dataset-mb", type=float, default=8000.0,
                        help="virtual dataset size for loading charges")
    parser.add_argument("--compute-epoch", type=float, default=60.0)
    args = parser.parse_args()

    selector = {"s3": "s3", "elasticache_t3": "cache", "elasticache_m5": "cache"}
    print(f"{'channel':16s} {'epochs':>6s} {'sim_s':>10s} {'model_s':>10s} "
          f"{'gap':>7s}")
    for channel in args.channels.split(","):
        for epochs in (int(e) for e in args.epochs.split(",")):
            cfg = JobConfig(
                model="lr",
                dataset=DatasetSpec(n=args.rows, d=args.features),
                workers=args.workers, algorithm="ga_sgd", channel=channel,
                pattern="allreduce", sync="bsp", lr=0.05,
                batch_size=-(-args.rows // args.workers),
                loss_threshold=0.0, max_epochs=epochs, mode="simulate",
                seed=1, sim_data_mb=args.dataset_mb,
                compute_seconds_per_epoch=args.compute_epoch)
            sim_total = run_job(cfg).breakdown["total_s"]
            p = CostModelParams(
                dataset_mb=args.dataset_mb,
                model_mb=args.features * 8 / 1e6, workers=args.workers,
                epochs_faas=float(epochs),
                compute_epoch_faas=args.compute_epoch,
                faas_channel=selector.get(channel, "s3"))
            model_total = faas_time(p).total_s
            gap = (sim_total - model_total) / model_total
            print(f"{channel:16s} {epochs:6d} {sim_total:10.2f} "
                  f"{model_total:10.2f} {gap:7.1%}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
