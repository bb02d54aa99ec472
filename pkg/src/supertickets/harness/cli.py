"""Command-line entry point: ``supertickets <stage> --config exp.yaml``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..checkpoint import CheckpointError
from ..model import ConfigError
from ..mtl import task_share_report, write_share_csv
from ..tickets import POLICIES, read_scores_csv
from . import config as config_mod
from . import pipeline
from .report import StatsError, write_report

STAGES = ("train", "score", "prune", "rewind", "sweep", "mtl", "finetune", "report")
log = logging.getLogger("supertickets")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="supertickets", description="Structured lottery tickets on toy Transformer tasks.")
    sub = p.add_subparsers(dest="stage", required=True, parser_class=_Parser)
    for name in STAGES:
        s = sub.add_parser(name)
        s.add_argument("--config", "-c", required=True, help="experiment YAML file")
        s.add_argument("--verbose", "-v", action="store_true")
        if name in ("train", "score", "prune", "rewind", "sweep"):
            s.add_argument("--task", action="append", help="restrict to these tasks (repeatable)")
        if name in ("train", "score", "prune", "rewind"):
            s.add_argument("--seed", type=int, action="append", help="restrict to these seeds (repeatable)")
        if name in ("prune", "rewind"):
            s.add_argument("--k", type=int, action="append", help="sparsity level(s); default sweep.levels")
            s.add_argument("--policy", choices=POLICIES, action="append", help="default sweep.policies")
    return p


def _targets(cfg, args):
    tasks = args.task or [t.name for t in cfg.tasks]
    for t in tasks:
        cfg.task(t)
    seeds = getattr(args, "seed", None) or cfg.sweep.seeds
    return tasks, seeds


def _report(cfg) -> None:
    write_report(cfg.output_dir)
    seed = cfg.sweep.seeds[0]
    scores = {}
    for t in cfg.tasks:
        path = pipeline.seed_dir(cfg, t.name, seed) / "scores.csv"
        if path.exists():
            scores[t.name] = read_scores_csv(path)[1]
    if scores:
        write_share_csv(cfg.output_dir / "report" / "task_share.csv", task_share_report(scores))


def run(args) -> None:
    cfg = config_mod.load(args.config)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    stage = args.stage
    if stage == "train":
        tasks, seeds = _targets(cfg, args)
        for t in tasks:
            for s in seeds:
                print(pipeline.train_stage(cfg, t, s))
    elif stage == "score":
        tasks, seeds = _targets(cfg, args)
        for t in tasks:
            for s in seeds:
                pipeline.score_stage(cfg, t, s)
    elif stage in ("prune", "rewind"):
        tasks, seeds = _targets(cfg, args)
        for k in args.k or []:
            if not 0 <= k <= 8:
                raise ConfigError(f"--k must be in 0..8, got {k}")
        for t in tasks:
            for s in seeds:
                for pol in args.policy or cfg.policies(t):
                    for k in args.k or cfg.levels(t):
                        if stage == "prune":
                            pipeline.prune_stage(cfg, t, s, pol, k)
                        else:
                            print(pipeline.rewind_stage(cfg, t, s, pol, k))
    elif stage == "sweep":
        pipeline.run_sweep(cfg, args.task)
        print(cfg.output_dir / "sweep.csv")
    elif stage == "mtl":
        pipeline.mtl_stage(cfg)
        print(cfg.output_dir / "mtl.csv")
    elif stage == "finetune":
        pipeline.finetune_stage(cfg)
        print(cfg.output_dir / "finetune.csv")
    elif stage == "report":
        _report(cfg)
        print(cfg.output_dir / "report")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run(args)
    except (ConfigError, CheckpointError, StatsError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
