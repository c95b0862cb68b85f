"""Command line entry point: ``seqvalue {gen-data,train,eval,oracle-check,stats}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .archive import ArchiveError
from .config import ConfigError, load_config
from .dataset import DatasetError
from .oracle import OracleError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set H=4 --set env.K=3 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqvalue", description=__doc__)
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="collect a noisy play dataset")
    _common(p)

    p = sub.add_parser("train", help="train value, critics and policy; writes checkpoints and metrics.csv")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or the scripted policy")
    _common(p)
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--checkpoint")
    who.add_argument("--scripted", action="store_true", help="evaluate the scripted optimal policy")
    p.add_argument("--mode", choices=["sample", "mean", "greedy", "softmax"])
    p.add_argument("--n", type=int, help="candidates for best-of-N selection")
    p.add_argument("--beta", type=float, help="softmax inverse temperature")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("oracle-check", help="compare a checkpoint with exact expectile values")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mean-tol", type=float, default=0.05, help="fraction of support range")
    p.add_argument("--max-tol", type=float, default=0.15, help="fraction of support range")
    p.add_argument("--table-out", help="write oracle V/Q tables as JSON")

    p = sub.add_parser("stats", help="dataset return statistics, or last-k averages of a metrics file")
    _common(p)
    p.add_argument("--metrics", help="metrics.csv to aggregate instead of a dataset")
    p.add_argument("--last", type=int, default=3, help="evaluation rows to average")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "gen-data":
            out = pipeline.gen_data(cfg)
        elif args.command == "train":
            res = pipeline.train(cfg)
            out = {k: res[k] for k in ("final_checkpoint", "metrics")}
            out["last_row"] = res["rows"][-1] if res["rows"] else None
        elif args.command == "eval":
            out = pipeline.evaluate(
                cfg, None if args.scripted else args.checkpoint,
                mode=args.mode, n=args.n, beta=args.beta, episodes=args.episodes, seed=args.seed,
            )
        elif args.command == "oracle-check":
            out = pipeline.oracle_check(cfg, args.checkpoint, mean_tol=args.mean_tol,
                                        max_tol=args.max_tol, table_out=args.table_out)
        else:
            if args.metrics:
                rows = pipeline.load_metrics(args.metrics)
                tail = rows[-args.last:]
                out = {k: sum(r[k] for r in tail) / len(tail) for k in ("eval_success", "eval_return")} if tail else {}
                out["rows_averaged"] = len(tail)
            else:
                out = pipeline.dataset_stats(cfg.dataset, cfg.gamma1, cfg.gamma2, cfg.H, cfg.env.horizon)
    except (ConfigError, DatasetError, ArchiveError, OracleError, pipeline.PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(out, indent=2, sort_keys=True, default=float))
    if args.command == "oracle-check" and not out["passed"]:
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
