"""Command-line entry point: retrikt <stage> --config <path> [--seed S] [--out DIR]."""

from __future__ import annotations

import argparse
import sys

from .pipeline import STAGES, ConfigError, RunConfig, StageError, run_stage


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retrikt",
        description="Staged knowledge-transfer pipeline: prompt-tune a frozen generator, "
        "refine it with PPO, build a knowledge store, and train/evaluate tiny students.",
    )
    parser.add_argument("stage", choices=STAGES, help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="path to a flat key-value config file")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--out", default=None, help="override run.out_dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg.run.seed = args.seed
        if args.out is not None:
            cfg.run.out_dir = args.out
        run_stage(cfg, args.stage)
    except (ConfigError, StageError, OSError, ValueError, RuntimeError) as err:
        print(f"{args.stage}: {err}", file=sys.stderr)
        return 1
    print(f"{args.stage}: done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
