"""Command line entry point: ``xferlab {generate,train-base,adapt,grid,evaluate}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import FINETUNE, Candidate, ExperimentConfig
from .errors import ConfigError, XferlabError
from .model import POSITIONS


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xferlab", description="Constrained domain adaptation experiments for transducer models.", epilog="exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write the synthetic datasets named in the config")
    g.add_argument("--config", required=True)

    t = sub.add_parser("train-base", help="train the base model on the original domain")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    a = sub.add_parser("adapt", help="adapt one candidate to the new domain")
    a.add_argument("--config", required=True)
    a.add_argument("--base", required=True)
    a.add_argument("--position", required=True, choices=[*POSITIONS, FINETUNE])
    a.add_argument("--hidden", type=int, default=0)
    a.add_argument("--dropout", type=float, default=0.0)
    a.add_argument("--sdepth", type=float, default=0.0)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--lr", type=float, required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)

    r = sub.add_parser("grid", help="run the grid search and select winners")
    r.add_argument("--config", required=True)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--base", help="base checkpoint (defaults to base_ckpt in the config)")
    r.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="greedy-decode datasets and report WER")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, nargs="+")
    e.add_argument("--out", required=True)
    return p


def run(argv) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if args.command == "generate":
        for path, n in harness.generate_data(ExperimentConfig.load(args.config)).items():
            print(f"{n:6d} utterances -> {path}")
    elif args.command == "train-base":
        for r in harness.cmd_train_base(args.config, args.out).values():
            print(f"{r.dataset_id}: WER {r.wer:.2f}")
    elif args.command == "adapt":
        if args.position != FINETUNE and args.hidden < 1:
            raise ConfigError("--hidden must be >= 1 for adapter positions")
        cand = Candidate(args.position, args.steps, args.lr, args.hidden, args.dropout, args.sdepth)
        res = harness.cmd_adapt(args.config, args.base, cand, args.seed, args.out)
        print(json.dumps(res["score"], sort_keys=True))
    elif args.command == "grid":
        doc = harness.cmd_grid(args.config, args.out, jobs=args.jobs, base_ckpt=args.base)
        print(f"constrained winner:   {doc['constrained_winner']}")
        print(f"unconstrained winner: {doc['unconstrained_winner']}")
        if doc["failures"]:
            print(f"{len(doc['failures'])} cell(s) failed; see selection.json")
    elif args.command == "evaluate":
        for r in harness.cmd_evaluate(args.ckpt, args.data, args.out).values():
            print(f"{r.dataset_id}: WER {r.wer:.2f}")
    return 0


def main(argv=None) -> int:
    try:
        return run(sys.argv[1:] if argv is None else argv)
    except XferlabError as exc:
        print(f"xferlab: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
