"""Command-line entry point: ``genrec <verb> [--config FILE] [--section.key VALUE ...]``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Sequence

from . import pipeline
from .config import DEFAULTS, _format, load
from .errors import GenRecError

VERBS = {
    "synth": "generate the synthetic interaction and embedding files",
    "fit-codecs": "fit one residual quantizer per modality and write semantic-ID tables",
    "train": "train the encoder-decoder on the semantic-ID tables",
    "eval": "constrained beam-search evaluation on the test split",
    "ablate-shapley": "evaluate every modality subset and report Shapley attributions",
    "decode": "rank items for a single history",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value configuration file")
    group = p.add_argument_group("configuration keys (override file and GENREC_* environment)")
    for key, value in DEFAULTS.items():
        group.add_argument(f"--{key}", dest=key, metavar="VALUE", default=None, help=f"default: {_format(value)}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genrec", description="Multimodal generative recommendation over semantic IDs.")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")
    for verb, help_text in VERBS.items():
        p = sub.add_parser(verb, help=help_text, description=help_text)
        _add_config_flags(p)
        if verb in ("eval", "ablate-shapley", "decode"):
            p.add_argument("--checkpoint", metavar="FILE", help="model checkpoint (default: <out_dir>/model.ckpt)")
        if verb == "decode":
            p.add_argument("--history", required=True, help="comma-separated item ids, oldest first")
            p.add_argument("--top-k", type=int, default=10)
    return parser


def _history(raw: str) -> list[int]:
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--history expects comma-separated integers, got {raw!r}") from None


def run(args: argparse.Namespace) -> None:
    overrides = {k: getattr(args, k) for k in DEFAULTS if getattr(args, k, None) is not None}
    cfg = load(args.config, overrides)
    out = sys.stdout
    if args.verb == "synth":
        for name, path in pipeline.cmd_synth(cfg).items():
            print(f"{name}\t{path}", file=out)
    elif args.verb == "fit-codecs":
        for name, path in pipeline.cmd_fit_codecs(cfg).items():
            print(f"{name}\t{path}", file=out)
    elif args.verb == "train":
        result = pipeline.cmd_train(cfg)
        rec = result.history[result.best_epoch - 1]
        print(f"best_epoch={result.best_epoch} valid_loss={rec['valid_loss']!r}", file=out)
        print(f"checkpoint\t{pipeline.checkpoint_path(cfg)}", file=out)
    elif args.verb == "eval":
        report = pipeline.cmd_eval(cfg, args.checkpoint)
        for k, v in report.items():
            print(f"{k}={v!r}", file=out)
    elif args.verb == "ablate-shapley":
        report = pipeline.cmd_ablate_shapley(cfg, args.checkpoint)
        print(json.dumps(report["shapley"], indent=2), file=out)
    elif args.verb == "decode":
        for item, score in pipeline.cmd_decode(cfg, _history(args.history), args.top_k, args.checkpoint):
            print(f"{item}\t{score!r}", file=out)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run(args)
    except GenRecError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except argparse.ArgumentTypeError as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
