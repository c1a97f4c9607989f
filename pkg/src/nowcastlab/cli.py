"""Command-line entry point.

Subcommands: gen-data, train-det, train-ae, train-diff, sample, eval,
ablate.  Each takes --config, --seed, --out.  Exit codes: 0 success,
2 configuration error, 3 missing prerequisite artifact, 4 numerical
failure (non-finite values).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, load_config, with_seed
from .numerics import NumericalError
from .pipeline import ABLATION_KINDS, PrerequisiteError, run_ablation, \
    run_evaluate, run_gen_data, run_sample, run_train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_NUMERICAL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nowcastlab",
        description="cascaded latent-diffusion precipitation nowcasting at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="INI experiment config")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override the master seed from the config")
        cmd.add_argument("--out", required=True, help="output directory")
        return cmd

    add("gen-data", "write the dataset manifest of event seeds")
    add("train-det", "train the deterministic forecaster")
    add("train-ae", "train the frame autoencoder")
    add("train-diff", "train the latent diffusion stage (needs det + ae)")
    add("sample", "sample the forecast ensemble for the test events")
    add("eval", "score forecasts and render frame grids")
    ablate = add("ablate", "run a comparison study")
    ablate.add_argument("--kind", required=True, choices=ABLATION_KINDS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = with_seed(config, args.seed)
        out_dir = Path(args.out)
        if args.command == "gen-data":
            split = run_gen_data(config, out_dir)
            print(f"manifest written to {out_dir / 'manifest.txt'} "
                  f"({len(split.train)}/{len(split.val)}/{len(split.test)} events)")
        elif args.command in ("train-det", "train-ae", "train-diff"):
            stage = args.command.split("-", 1)[1]
            path = run_train(stage, config, out_dir)
            print(f"final checkpoint: {path}")
        elif args.command == "sample":
            seeds = run_sample(config, out_dir)
            print(f"sampled ensemble for {len(seeds)} events into {out_dir}")
        elif args.command == "eval":
            path = run_evaluate(config, out_dir)
            print(f"metrics written to {path}")
        elif args.command == "ablate":
            path = run_ablation(args.kind, config, out_dir)
            print(f"ablation results written to {path}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, CheckpointError) as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQUISITE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
