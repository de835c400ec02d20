"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import CheckpointFormatError, ConfigError, InputError, NumericError

log = logging.getLogger("attnmix")


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out = str(Path(args.out).resolve())
    if getattr(args, "reset_w", None) is not None:
        cfg.finetune.reset_w = args.reset_w
    if getattr(args, "method", None):
        cfg.method = args.method
    cfg.validate()
    return cfg


def _print_report(rep: pipeline.ExperimentReport) -> None:
    for seed, value in rep.values.items():
        print(f"seed {seed}: {rep.metric} = {value:.4f}")
    print(f"{rep.method} on {rep.dataset}: {rep.metric} {100 * rep.mean:.2f} +- {100 * rep.std:.2f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnmix", description="Learned weight mixing between pretrained and task weights.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="run this single seed instead of the config list")
        p.add_argument("--out", help="output directory (overrides the config)")
        return p

    common(sub.add_parser("pretrain", help="train the source model and save pretrained weights"))
    common(sub.add_parser("search", help="learn mixing coefficients (search phase only)"))
    ft = common(sub.add_parser("finetune", help="finetune with previously learned coefficients"))
    ft.add_argument("--coefficients", help="run directory holding seed_*/coefficients.bin")
    run = common(sub.add_parser("run", help="search then finetune, and report"))
    for p in (ft, run):
        p.add_argument("--reset-w", dest="reset_w", action="store_true", default=None,
                       help="finetune from the pretrained weights (default)")
        p.add_argument("--no-reset-w", dest="reset_w", action="store_false",
                       help="finetune from the first replicate's search-phase weights")
    bl = common(sub.add_parser("baseline", help="vanilla, joint, random_alpha or model_soup"))
    bl.add_argument("--method", choices=["vanilla", "joint", "random_alpha", "model_soup"])

    rep = sub.add_parser("report", help="tabulate finished runs")
    rep.add_argument("runs", nargs="+", help="run directories")
    rep.add_argument("--out", help="directory for summary.csv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(pipeline.cmd_report([Path(r) for r in args.runs],
                                      Path(args.out) if args.out else None))
            return 0
        cfg = _load(args)
        if args.command == "pretrain":
            print(pipeline.cmd_pretrain(cfg))
        elif args.command == "search":
            coefs = pipeline.cmd_search(cfg)
            print(f"learned coefficients for seeds {sorted(coefs)} in {cfg.out_dir}")
        elif args.command == "finetune":
            coef_dir = Path(args.coefficients) if args.coefficients else None
            _print_report(pipeline.cmd_finetune(cfg, coef_dir))
        elif args.command == "run":
            _print_report(pipeline.cmd_search_finetune(cfg))
        elif args.command == "baseline":
            _print_report(pipeline.cmd_baseline(cfg))
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return 2
    except (ConfigError, CheckpointFormatError, InputError) as exc:
        log.error("configuration error: %s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
