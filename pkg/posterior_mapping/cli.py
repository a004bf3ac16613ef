"""Command-line entry point: ``python -m posterior_mapping <command>``."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from dotenv import load_dotenv

from .config import ExperimentConfig
from .errors import ArtifactError, ConfigError, NumericalError, PosteriorMappingError
from .pipeline import Pipeline

COMMANDS = {
    "generate": "generate the language family and its train/val/test corpora",
    "train-am": "train monolingual and pooled acoustic models",
    "train-map": "train a mapping network for every ordered language pair",
    "analyze": "similarity reports, matrices, probes and degradation tables",
    "fuse": "search fusion weights and evaluate fused posteriors",
    "report": "bundle every table into report/ with an index",
    "verify": "re-check the checksums of every stage that has run",
    "run-all": "run generate through report in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="experiment config (YAML)")
    common.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    common.add_argument("--jobs", type=int, default=None, help="parallel workers within a stage")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging and progress bars")
    common.add_argument("-q", "--quiet", action="store_true", help="no stage banners")

    parser = argparse.ArgumentParser(
        prog="posterior_mapping",
        description="Cross-lingual acoustic similarity through posterior mapping networks.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        commands.add_parser(name, parents=[common], help=help_text)
    return parser


def _kind(exc: PosteriorMappingError) -> str:
    if isinstance(exc, ConfigError):
        return "Config"
    if isinstance(exc, ArtifactError):
        return "Artifact"
    if isinstance(exc, NumericalError):
        return "Numerical"
    return "Pipeline"


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = ExperimentConfig.from_yaml(args.config, seed=args.seed, output_dir=args.out, jobs=args.jobs)
        pipeline = Pipeline(cfg, verbose=not args.quiet, show_progress=args.verbose)
        if args.command == "run-all":
            pipeline.run_all()
        else:
            pipeline.run(args.command)
    except PosteriorMappingError as exc:
        print(f"{_kind(exc)} Error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0
