"""``gsplan`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import GsplanError
from .pipeline import COMMANDS, PipelineConfig

EXIT_MISSING_INPUT = 2
EXIT_FAILURE = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsplan", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, dest="rng_seed")
    parser.add_argument("--out", dest="out_dir", help="output directory (overrides config)")
    parser.add_argument("--n-trajectories", type=int)
    parser.add_argument("--length", type=int)
    parser.add_argument("--score-resolution", type=int)
    parser.add_argument("--enhancer", help="external enhancer command template")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = PipelineConfig.from_file(
            args.config,
            rng_seed=args.rng_seed, out_dir=args.out_dir,
            n_trajectories=args.n_trajectories, length=args.length,
            score_resolution=args.score_resolution, enhancer=args.enhancer,
        )
        COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_INPUT, exc)
    except (GsplanError, OSError, ValueError, KeyError) as exc:
        return _fail(EXIT_FAILURE, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
