"""Command-line harness: train jobs, evaluate the cost model, estimate epochs.

Exit codes for `train`: 0 converged, 2 finished without reaching the loss
threshold, 1 error. The FAASML_SEED environment variable overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import costmodel
from .config import LoadedConfig, load_config_dict, load_config_file
from .errors import EstimateFailed, FaasmlError
from .optimizers import ALGO_ADMM, ALGO_GA_SGD
from .runtime import run_job


def _load(path: str | None) -> LoadedConfig:
    if path is None:
        return load_config_dict({})
    return load_config_file(path)


def _apply_train_overrides(loaded: LoadedConfig, args) -> None:
    cfg = loaded.job
    for name in ("mode", "workers", "algorithm", "channel", "pattern", "sync",
                 "seed"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    env_seed = os.environ.get("FAASML_SEED")
    if env_seed is not None:
        try:
            cfg.seed = int(env_seed)
        except ValueError:
            raise FaasmlError(f"FAASML_SEED must be an integer, got {env_seed!r}")
    cfg.validate()


def cmd_train(args) -> int:
    loaded = _load(args.config)
    _apply_train_overrides(loaded, args)
    report = run_job(loaded.job)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "trace.csv").write_text(report.trace_csv())
    bd = report.breakdown
    print(f"converged={report.converged} epochs={report.epochs} "
          f"rounds={report.rounds} total_s={bd['total_s']:.6g} "
          f"cost_usd={report.dollar_cost_usd:.6g}")
    print(f"breakdown: startup={bd['startup_s']:.6g} loading={bd['loading_s']:.6g} "
          f"compute={bd['compute_s']:.6g} "
          f"communication={bd['communication_s']:.6g}")
    print(f"wrote {out_dir / 'report.json'} and {out_dir / 'trace.csv'}")
    return 0 if report.converged else 2


def _parse_w_list(text: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise FaasmlError(f"--sweep expects a comma-separated list, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise FaasmlError("--sweep worker counts must be >= 1")
    return values


def cmd_model(args) -> int:
    loaded = _load(args.constants)
    params = loaded.costmodel
    if args.scenario is not None:
        scenario = costmodel.get_scenario(args.scenario)
        w_values = _parse_w_list(args.sweep) if args.sweep else [params.workers]
        results = []
        for w in w_values:
            results.extend(costmodel.whatif(scenario, replace(params, workers=w)))
        csv = costmodel.whatif_csv(results)
    else:
        w_values = _parse_w_list(args.sweep) if args.sweep else [params.workers]
        rows = costmodel.sweep(params, w_values)
        csv = costmodel.sweep_csv(rows)
    if args.out:
        Path(args.out).write_text(csv)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv)
    return 0


def cmd_estimate(args) -> int:
    if args.config is None:
        raise FaasmlError("estimate requires --config with a [job] section")
    loaded = _load(args.config)
    cfg = loaded.job
    params = loaded.costmodel
    dataset = cfg.dataset.load(cfg)
    out: dict = {"schema": "v1", "sample_frac": args.sample_frac,
                 "threshold": cfg.loss_threshold}
    estimates = {}
    for label, algorithm in (("sgd", ALGO_GA_SGD), ("admm", ALGO_ADMM)):
        r = costmodel.estimate_epochs(
            dataset, algorithm, cfg.loss_threshold,
            sample_frac=args.sample_frac, seed=cfg.seed, lr=cfg.lr,
            batch_size=cfg.batch_size, local_epochs=max(cfg.local_epochs, 1),
            rho=cfg.rho, l2=cfg.l2, model_kind=cfg.model, k=cfg.k,
            max_epochs=args.cap)
        estimates[label] = r
        p = replace(params, epochs_faas=float(r), epochs_iaas=float(r))
        faas = costmodel.faas_time(p)
        iaas = costmodel.iaas_time(p)
        out[f"predicted_{label}"] = {"faas_s": faas.total_s,
                                     "iaas_s": iaas.total_s}
    out["R_sgd"] = estimates["sgd"]
    out["R_admm"] = estimates["admm"]
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faasml",
        description="Serverless-style distributed training jobs, the "
                    "analytical cost model, and the epoch estimator.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training job")
    train.add_argument("--config", help="TOML config with a [job] section")
    train.add_argument("--mode", choices=["real_local", "simulate"])
    train.add_argument("--workers", type=int)
    train.add_argument("--algorithm",
                       choices=["ga_sgd", "ma_sgd", "admm", "kmeans_em"])
    train.add_argument("--channel")
    train.add_argument("--pattern",
                       choices=["allreduce", "scatterreduce", "ps"])
    train.add_argument("--sync", choices=["bsp", "asp"])
    train.add_argument("--seed", type=int)
    train.add_argument("--out-dir", default=".")
    train.set_defaults(fn=cmd_train)

    model = sub.add_parser("model", help="evaluate the analytical cost model")
    model.add_argument("--constants",
                       help="TOML with [costmodel] and [pricing] sections")
    model.add_argument("--sweep", help="comma-separated worker counts")
    model.add_argument("--scenario",
                       help="named what-if scenario instead of a plain sweep")
    model.add_argument("--out", help="write CSV here instead of stdout")
    model.set_defaults(fn=cmd_model)

    est = sub.add_parser("estimate",
                         help="sampling-based epochs-to-converge estimate")
    est.add_argument("--config", help="TOML config with a [job] section")
    est.add_argument("--sample-frac", type=float, default=0.1)
    est.add_argument("--cap", type=int, default=200,
                     help="epoch cap for the estimator")
    est.set_defaults(fn=cmd_estimate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except EstimateFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FaasmlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
