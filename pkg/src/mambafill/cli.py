"""Command-line entry point.

Subcommands: generate, train, impute, evaluate, ablate, sensitivity,
downstream, gradcheck, scancheck. Global flags: --config (JSON file over the
experiment key space), --seed, --out. Exit codes: 0 success, 1 usage or
configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from .bench import (ConfigError, ExperimentConfig, append_jsonl, prepare_data,
                    run_ablation, run_benchmark, run_downstream,
                    run_sensitivity, train_model, write_curve_csv,
                    write_manifest)
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import DEFAULT_TOL, run_full_suite
from .masking import save_mask
from .model import NoisePredictor
from .pipeline import save_adjacency, save_series
from .ssm import scan_equivalence_max_dev

SCAN_TOL = 1e-9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="mambafill",
                     description="Diffusion imputation benchmark harness")
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--out", type=Path, default=None,
                        help="output directory (default runs/<command>)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", help="write the synthetic dataset files")
    train_p = sub.add_parser("train", help="train one model, save a checkpoint")
    train_p.add_argument("--log-every", type=int, default=0)
    imp_p = sub.add_parser("impute", help="impute the test split from a checkpoint")
    imp_p.add_argument("--checkpoint", type=Path, required=True)
    ev = sub.add_parser("evaluate", help="full benchmark vs baselines")
    ev.add_argument("--log-every", type=int, default=0)
    ab = sub.add_parser("ablate", help="bidirectional vs unidirectional study")
    ab.add_argument("--n-seeds", type=int, default=3)
    sub.add_parser("sensitivity", help="missing-rate sweep on one checkpoint")
    ds = sub.add_parser("downstream", help="node-prediction task per imputer")
    ds.add_argument("--target-node", type=int, default=None)
    sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sub.add_parser("scancheck", help="parallel vs sequential scan agreement")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_generate(cfg: ExperimentConfig, out: Path) -> int:
    tic = time.perf_counter()
    data = prepare_data(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_series(out / "series.csv", data.truth, data.observed)
    save_series(out / "truth_series.csv", data.truth,
                np.ones_like(data.observed))
    save_adjacency(out / "adjacency.csv", data.graph.adjacency)
    save_mask(out / "observed_mask.bin", data.observed,
              {"seed": cfg.seed, "scenario": cfg.scenario,
               "missing_rate": cfg.missing_rate})
    write_manifest(out, "generate", cfg, {"total": time.perf_counter() - tic})
    print(f"wrote dataset ({cfg.nodes} nodes x {cfg.horizon} steps) to {out}")
    return 0


def _cmd_train(cfg: ExperimentConfig, out: Path, log_every: int) -> int:
    tic = time.perf_counter()
    data = prepare_data(cfg)
    model, result, _ = train_model(cfg, data, log_every=log_every)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", result.best_state,
                    model.cfg.config_hash())
    write_curve_csv(out / "loss_curve.csv", ["step", "loss"],
                    list(enumerate(result.loss_curve)))
    write_manifest(out, "train", cfg, {"total": time.perf_counter() - tic},
                   {"best_epoch": result.best_epoch,
                    "final_loss": result.loss_curve[-1] if result.loss_curve else None})
    print(f"trained {cfg.mode} model for {cfg.epochs} epochs; "
          f"checkpoint at {out / 'checkpoint.bin'}")
    return 0


def _cmd_impute(cfg: ExperimentConfig, out: Path, ckpt_path: Path) -> int:
    from .bench import evaluate_model

    tic = time.perf_counter()
    data = prepare_data(cfg)
    stored_hash, params = load_checkpoint(ckpt_path)
    model_cfg = cfg.model_config()
    if stored_hash != model_cfg.config_hash():
        raise ValueError(f"{ckpt_path}: checkpoint was written for a "
                         "different model configuration")
    model = NoisePredictor(model_cfg, seed=cfg.seed)
    model.load_state_dict(params)
    x_hat, scored, imp = evaluate_model(model, cfg.schedule(), cfg, data)
    out.mkdir(parents=True, exist_ok=True)
    flat = np.concatenate([w for w in x_hat], axis=-1)
    save_series(out / "imputed_series.csv", flat, np.ones(flat.shape, dtype=bool))
    append_jsonl(out / "metrics.jsonl", {
        "scenario": cfg.scenario, "imputer": "model", "seed": cfg.seed,
        "mae": scored.mae, "mse": scored.mse,
        "wall_time_s": round(imp.wall_time, 3)})
    write_manifest(out, "impute", cfg, {"total": time.perf_counter() - tic})
    print(f"imputation MAE {scored.mae:.4f} MSE {scored.mse:.4f}")
    return 0


def _cmd_evaluate(cfg: ExperimentConfig, out: Path, log_every: int) -> int:
    summary = run_benchmark(cfg, out, log_every=log_every)
    for name, m in summary["metrics"].items():
        print(f"{name:>8}: MAE {m.mae:.4f}  MSE {m.mse:.4f}")
    return 0


def _cmd_ablate(cfg: ExperimentConfig, out: Path, n_seeds: int) -> int:
    rows = run_ablation(cfg, out, n_seeds=n_seeds)
    for row in rows:
        print(f"{row['variant']:>4} seed {row['seed']}: "
              f"MAE {row['mae']:.4f}  MSE {row['mse']:.4f}")
    return 0


def _cmd_sensitivity(cfg: ExperimentConfig, out: Path) -> int:
    summary = run_sensitivity(cfg, out)
    for rate, mae, mse in zip(summary["rates"], summary["mae"], summary["mse"]):
        print(f"rate {rate:.0%}: MAE {mae:.4f}  MSE {mse:.4f}")
    print(f"inversions: {summary['n_inversions']} "
          f"(max magnitude {summary['max_inversion']:.4g})")
    return 0


def _cmd_downstream(cfg: ExperimentConfig, out: Path, target_node) -> int:
    rows = run_downstream(cfg, out, target_node=target_node)
    for row in rows:
        print(f"{row['imputer']:>7} seed {row['seed']}: "
              f"MAE {row['mae']:.4f}  MSE {row['mse']:.4f}")
    return 0


def _cmd_gradcheck() -> int:
    results = run_full_suite()
    worst = 0.0
    for name, err in results.items():
        print(f"{name:>24}: rel err {err:.3e}")
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e} (tolerance {DEFAULT_TOL:.0e})")
    return 0 if worst < DEFAULT_TOL else 2


def _cmd_scancheck() -> int:
    dev = scan_equivalence_max_dev()
    print(f"max |sequential - parallel| deviation: {dev:.3e} "
          f"(tolerance {SCAN_TOL:.0e})")
    return 0 if dev < SCAN_TOL else 2


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1

    try:
        cfg = _load_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1

    out = args.out if args.out is not None else Path("runs") / args.command
    try:
        if args.command == "generate":
            return _cmd_generate(cfg, out)
        if args.command == "train":
            return _cmd_train(cfg, out, args.log_every)
        if args.command == "impute":
            return _cmd_impute(cfg, out, args.checkpoint)
        if args.command == "evaluate":
            return _cmd_evaluate(cfg, out, args.log_every)
        if args.command == "ablate":
            return _cmd_ablate(cfg, out, args.n_seeds)
        if args.command == "sensitivity":
            return _cmd_sensitivity(cfg, out)
        if args.command == "downstream":
            return _cmd_downstream(cfg, out, args.target_node)
        if args.command == "gradcheck":
            return _cmd_gradcheck()
        if args.command == "scancheck":
            return _cmd_scancheck()
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
