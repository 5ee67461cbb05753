"""Command-line entry point: python -m app.main <command> [options]"""

import argparse
import asyncio
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from app.core.config import RunConfig, load_config
from app.core.errors import ConfigError, PaneError
from app.core.logging import configure_logging, get_logger
from app.services.command_handler import SWEEPABLE, CommandHandler

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_PANE_ERROR = 2

# flag name -> RunConfig field, for the common knobs
CONFIG_FLAGS = {
    "data_dir": Path,
    "output_dir": Path,
    "train_edges": Path,
    "test_edges": Path,
    "seed": int,
    "variant": str,
    "epochs": int,
    "H": int,
    "K": int,
    "b": float,
    "p": float,
    "delta": float,
    "lambda1": float,
    "lambda2": float,
    "tau": float,
    "lr": float,
    "batch_size": int,
    "neg_samples_per_edge": int,
    "split_kind": str,
    "folds": int,
    "fold_index": int,
    "filter_mode": str,
    "checkpoint_every": int,
}


def _key_values(pairs: Sequence[str], what: str) -> Dict[str, str]:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"{what} expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key=value config file")
    for name, kind in CONFIG_FLAGS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None)
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override any config field",
    )
    parser.add_argument("--capped-idcg", dest="capped_idcg", action="store_const", const=True, default=None)
    parser.add_argument("--step-per-epoch", dest="step_per_epoch", action="store_const", const=True, default=None)
    parser.add_argument("--early-stopping", dest="early_stopping", action="store_const", const=True, default=None)
    parser.add_argument("--k-list", dest="k_list", default=None, help="comma-separated cut-offs, e.g. 5,10,15")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-json", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pane-gnn", description="Signed bipartite graph recommender")
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="raw ratings -> signed edge file and id maps")
    ingest.add_argument("input", type=Path)
    ingest.add_argument("--format", choices=["movielens", "watch-ratio-csv"], default="movielens")
    ingest.add_argument("--delimiter")
    ingest.add_argument("--rule", choices=["star-threshold", "watch-ratio-threshold"])
    ingest.add_argument("--threshold", type=float)
    ingest.add_argument("--min-interactions", type=int)

    split = commands.add_parser("split", help="edges.tsv -> train.tsv / test.tsv")
    split.add_argument("--edges", type=Path)

    commands.add_parser("train", help="train a model and persist its run directory")

    evaluate = commands.add_parser("evaluate", help="score a checkpoint on the test edges")
    evaluate.add_argument("--checkpoint", type=Path)
    evaluate.add_argument("--out", type=Path)

    recommend = commands.add_parser("recommend", help="write top-K lists for users")
    recommend.add_argument("--checkpoint", type=Path)
    recommend.add_argument("--users", required=True, help="comma-separated raw user ids")
    recommend.add_argument("--k-rec", type=int, default=10)
    recommend.add_argument("--out", type=Path)

    sweep = commands.add_parser("sweep", help="train+evaluate over a parameter grid")
    sweep.add_argument(
        "--grid", action="append", default=[], metavar="KEY=V1,V2",
        help=f"one of {', '.join(SWEEPABLE)}; repeatable",
    )
    sweep.add_argument("--sequential", action="store_true")
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--out", type=Path)

    cv = commands.add_parser("cv", help="k-fold cross-validation over edges.tsv; per-fold rows plus mean and std")
    cv.add_argument("--edges", type=Path)
    cv.add_argument("--sequential", action="store_true")
    cv.add_argument("--workers", type=int)
    cv.add_argument("--out", type=Path)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient suite")
    gradcheck.add_argument("--configs", type=int, default=20)
    gradcheck.add_argument("--check-seed", dest="check_seed", type=int, default=0)

    synthesize = commands.add_parser("synthesize", help="write a block-structured signed dataset")
    synthesize.add_argument("--users", type=int, default=200)
    synthesize.add_argument("--items", type=int, default=400)
    synthesize.add_argument("--blocks", type=int, default=2)

    for sub in commands.choices.values():
        _add_config_flags(sub)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flags > config file > defaults"""
    overrides: Dict[str, Any] = {name: getattr(args, name, None) for name in CONFIG_FLAGS}
    for flag in ("capped_idcg", "step_per_epoch", "early_stopping"):
        overrides[flag] = getattr(args, flag, None)
    if getattr(args, "k_list", None):
        overrides["k_list"] = [int(k) for k in args.k_list.split(",") if k.strip()]
    overrides.update(_key_values(args.overrides, "--set"))
    return load_config(args.config, **overrides)


def command_arguments(args: argparse.Namespace) -> Dict[str, Any]:
    if args.command == "ingest":
        return {
            "input": args.input,
            "format": args.format,
            "delimiter": args.delimiter,
            "rule": args.rule,
            "threshold": args.threshold,
            "min_interactions": args.min_interactions,
        }
    if args.command == "split":
        return {"edges": args.edges}
    if args.command == "evaluate":
        return {"checkpoint": args.checkpoint, "out": args.out}
    if args.command == "recommend":
        users: List[str] = [u.strip() for u in args.users.split(",") if u.strip()]
        return {"checkpoint": args.checkpoint, "users": users, "k_rec": args.k_rec, "out": args.out}
    if args.command == "sweep":
        grid = {key: [v for v in values.split(",") if v] for key, values in _key_values(args.grid, "--grid").items()}
        return {
            "grid": grid,
            "batch_mode": "sequential" if args.sequential else "parallel",
            "workers": args.workers,
            "out": args.out,
        }
    if args.command == "cv":
        return {
            "edges": args.edges,
            "batch_mode": "sequential" if args.sequential else "parallel",
            "workers": args.workers,
            "out": args.out,
        }
    if args.command == "gradcheck":
        return {"configs": args.configs, "seed": args.check_seed}
    if args.command == "synthesize":
        return {"users": args.users, "items": args.items, "blocks": args.blocks}
    return {}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level, json=args.log_json)
    try:
        config = resolve_config(args)
        handler = CommandHandler(config, log_level=args.log_level)
        result = asyncio.run(handler.handle_command(args.command, command_arguments(args)))
    except PaneError as e:
        print(f"error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_PANE_ERROR
    except Exception as e:
        logger.exception("main.unhandled", command=args.command)
        print(f"error[internal]: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    print(json.dumps(result, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
