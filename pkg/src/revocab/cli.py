"""Command-line entry point.

One subcommand per pipeline stage plus `pipeline` (runs everything,
restartable) and `gen-corpus` (materializes a synthetic paired-language
corpus so the bundled configs are runnable out of the box).

Exit codes: 0 success, 1 usage or config error, 2 validation failure,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, NumericalError, ValidationError
from .pipeline import STAGES, PipelineConfig, PipelineRunner
from .synthcorpus import write_corpus


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through exit code 1
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="revocab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-corpus", help="write a synthetic paired-language corpus")
    gen.add_argument("--out", required=True, help="corpus directory to create")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--languages", default="en,xx", help="comma-separated pair, anchor first")
    gen.add_argument("--train-words", type=int, default=150_000)
    gen.add_argument("--heldout-words", type=int, default=10_000)
    gen.add_argument("--concepts", type=int, default=300)
    gen.add_argument("--shared-fraction", type=float, default=0.15)
    gen.add_argument("--target-script", choices=["latin", "glyph"], default="latin")

    for stage in STAGES + ["pipeline"]:
        p = sub.add_parser(stage, help=f"run the {stage} stage" if stage != "pipeline" else "run all stages in order")
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--doc-unit", choices=["line", "para"], default=None)
        if stage == "pipeline":
            p.add_argument("--stage", default=None, help="stop after this stage")
    return parser


def _runner(args) -> PipelineRunner:
    config = PipelineConfig.load(args.config)
    if args.seed is not None:
        config.raw["seed"] = args.seed
    if args.out is not None:
        config.raw["out_dir"] = args.out
    if args.doc_unit is not None:
        config.raw["doc_unit"] = args.doc_unit
    return PipelineRunner(config)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen-corpus":
            languages = tuple(args.languages.split(","))
            if len(languages) != 2:
                raise ConfigError("--languages must name exactly two languages")
            summary = write_corpus(
                args.out,
                seed=args.seed,
                languages=languages,
                train_words=args.train_words,
                heldout_words=args.heldout_words,
                n_concepts=args.concepts,
                shared_fraction=args.shared_fraction,
                target_script=args.target_script,
            )
            print(json.dumps(summary, indent=2))
        elif args.command == "pipeline":
            runner = _runner(args)
            runner.run_pipeline(upto=args.stage)
        else:
            runner = _runner(args)
            ran = runner.run_stage(args.command)
            if not ran:
                logging.getLogger(__name__).info(
                    "stage %s already current (hash match); nothing to do", args.command
                )
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
