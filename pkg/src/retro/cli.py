"""Command line: ``retro {pretrain,distill,probe,knn,finetune,report,ablation}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from retro import config as config_mod
from retro.pipeline import StageError, export_report, stage_distill, stage_eval, stage_pretrain

log = logging.getLogger("retro")


def _common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    if needs_config:
        p.add_argument("--config", required=True, help="experiment config file (key = value lines)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads; values above 1 void bitwise reproducibility")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retro", description="Self-supervised distillation runs")
    sub = parser.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("pretrain", help="MoCo-V2 pretraining of the teacher"))
    _common(sub.add_parser("distill", help="train a student in train.mode"))
    for name, text in (("probe", "linear probe on frozen features"),
                       ("knn", "cosine kNN evaluation"),
                       ("finetune", "fine-tune on a labelled fraction")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--run", default=None,
                       help="run to evaluate: teacher, baseline_moco, disco or retro "
                            "(default: train.mode)")
        if name == "finetune":
            p.add_argument("--fraction", type=float, default=0.1, help="labelled fraction in (0, 1]")
    p = sub.add_parser("report", help="summary.csv and curves.csv for an output directory")
    _common(p, needs_config=False)
    p = sub.add_parser("ablation", help="teacher once, then every mode over several seeds")
    _common(p)
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma separated seeds")
    return parser


def _load(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _dispatch(args) -> None:
    deterministic = args.threads == 1
    if args.command == "report":
        out = args.out or "runs"
        summary, curves = export_report(out)
        print(f"wrote {summary} and {curves}")
        return
    cfg = _load(args)
    if args.command == "pretrain":
        print(f"teacher run written to {stage_pretrain(cfg, args.out, deterministic)}")
    elif args.command == "distill":
        print(f"{cfg.train.mode} run written to {stage_distill(cfg, args.out, deterministic)}")
    elif args.command in ("probe", "knn", "finetune"):
        report = stage_eval(cfg, args.command, args.run, args.out,
                            fraction=getattr(args, "fraction", 1.0))
        print(f"{report.kind}: top1={report.top1:.4f} top5={report.top5:.4f}")
    elif args.command == "ablation":
        from retro.ablation import run_ablation
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        result = run_ablation(cfg, seeds, args.out or cfg.out_dir, deterministic)
        print(result.table())


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("RETRO_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            _dispatch(args)
    except (StageError, config_mod.ConfigFileError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
