"""Console entry point: generate data, run the pipeline, sweep, aggregate."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex

COMMANDS = ("generate", "pipeline", "q2-disturb", "q2-imbalance",
            "q3-sweep", "report")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairdeconf",
        description="Synthetic-EHR fairness pipeline: latent-factor "
                    "deconfounding plus a counterfactually regularized "
                    "attentive classifier.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write dataset, schema, and ground-truth files",
        "pipeline": "run both training stages and report test fairness",
        "q2-disturb": "sweep the clean/disturbed training mixture",
        "q2-imbalance": "sweep training-group imbalance ratios",
        "q3-sweep": "sweep latent width against a hidden confounder",
        "report": "aggregate rows.jsonl files into summary tables",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="TOML or JSON experiment "
                       "config; desk-scale defaults apply when omitted")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", type=Path, help="override the output root")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers for sweep points")
    return parser


def _load(args) -> ex.ExperimentConfig | None:
    if args.config is not None:
        cfg = ex.load_config(args.config)
    elif args.command == "report":
        cfg = None
    else:
        cfg = ex.ExperimentConfig.from_dict({})
    if cfg is not None:
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out_dir=str(args.out))
    return cfg


def _dispatch(args, cfg: ex.ExperimentConfig | None) -> None:
    if args.command == "generate":
        ds, _ = ex.cmd_generate(cfg)
        print(f"wrote {ds.n_patients} patients "
              f"({ds.n_encounters} encounters) to {cfg.out_dir}")
    elif args.command == "pipeline":
        report = ex.cmd_pipeline(cfg)
        print(f"test AUC {report.auc_overall:.4f}  "
              f"hd_binary {report.hd_binary:.3f}  "
              f"cf_gap {report.cf_gap:.4f}  -> {cfg.out_dir}/pipeline")
    elif args.command == "q2-disturb":
        rows = ex.cmd_q2_disturb(cfg, jobs=args.jobs)
        print(f"{len(rows)} rows -> {cfg.out_dir}/q2_disturb")
    elif args.command == "q2-imbalance":
        rows = ex.cmd_q2_imbalance(cfg, jobs=args.jobs)
        print(f"{len(rows)} rows -> {cfg.out_dir}/q2_imbalance")
    elif args.command == "q3-sweep":
        rows = ex.cmd_q3_sweep(cfg, jobs=args.jobs)
        print(f"{len(rows)} rows -> {cfg.out_dir}/q3_sweep")
    else:
        out = cfg.out_dir if cfg is not None else (args.out or "runs")
        table = ex.cmd_report(out)
        print(f"{len(table)} summary lines -> {out}/summary.csv")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except (ValueError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    try:
        _dispatch(args, cfg)
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
