"""Command-line entry point: ``hierkl {train,transfer,eval,verify,kl-field}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from ..errors import HierKLError
from .config import load_config, parse_value
from .klfield import goal_directed_fraction, kl_field, write_field
from .runtime import env_spec, evaluate, restore_stack, run_training
from .transfer import run_transfer
from .verify import MUTATIONS, format_report, run_verify


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    if getattr(args, "seed", None) is not None:
        out["run.seed"] = args.seed
    if getattr(args, "out_dir", None):
        out["run.out_dir"] = args.out_dir
    if getattr(args, "frames", None) is not None:
        out["run.frames"] = args.frames
    if getattr(args, "quasi_onpolicy", False):
        out["learner.quasi_onpolicy"] = True
    return out


def _common(p: argparse.ArgumentParser, run_flags: bool = True):
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    if run_flags:
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        p.add_argument("--frames", type=int, help="learner frames to process")
        p.add_argument("--quasi-onpolicy", action="store_true",
                       help="replay holds one batch, each segment is used once")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierkl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from scratch")
    p.add_argument("config")
    _common(p)

    p = sub.add_parser("transfer", help="train with components reused from a checkpoint")
    p.add_argument("config")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint greedily")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("verify", help="run the oracle checks")
    p.add_argument("--mutation", choices=sorted(MUTATIONS), help="inject a known bug first")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("kl-field", help="dump the KL-reward field of a grid-world checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--goal", type=int, nargs=2, default=(4, 4), metavar=("X", "Y"))
    p.add_argument("--output", default="kl_field.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except HierKLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "verify":
        results = run_verify(args.mutation, args.seed)
        print(format_report(results))
        return 0 if all(r.passed for r in results) else 1

    if args.command in ("train", "transfer"):
        cfg = load_config(args.config, _overrides(args))
        res = run_transfer(cfg) if args.command == "transfer" else run_training(cfg)
        summary = {"out_dir": str(res.out_dir), "checkpoint": str(res.checkpoint),
                   "learner_steps": res.state.updates, "learner_frames": res.learner_frames,
                   "actor_env_steps": res.env_steps, "final_eval": res.final_eval}
        print(json.dumps(summary, indent=2))
        return 0

    cfg = load_config(args.config, _overrides(args))
    stack, cfg = restore_stack(args.checkpoint, cfg)
    if args.command == "eval":
        res = evaluate(stack, stack.params, env_spec(cfg), args.episodes, np.random.default_rng(args.seed))
        print(json.dumps(res, indent=2))
        return 0

    spec = env_spec(cfg)
    if spec.grid is None:
        print("error: the KL field is only defined for the grid world", file=sys.stderr)
        return 2
    field = kl_field(stack, spec.grid, tuple(args.goal), rng=np.random.default_rng(args.seed))
    n = write_field(args.output, field, spec.grid)
    frac = goal_directed_fraction(field, spec.grid, tuple(args.goal))
    print(json.dumps({"rows": n, "output": args.output, "goal_directed_fraction": frac}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
