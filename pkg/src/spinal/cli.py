"""Command-line entry point: ``spinal {pretrain,transfer,analyze,grid,eval}``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import csvio
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config
from .experiment import (
    ExperimentPlan,
    agent_from_checkpoint,
    analyze_noise,
    extract_and_freeze,
    grid_search,
    pretrain,
    record_episodes,
    train_baseline,
    transfer,
    write_analysis,
    write_grid,
)

log = logging.getLogger("spinal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spinal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("pretrain", "train a hierarchy on the shaped task"),
                        ("transfer", "train a new high level over a frozen low level"),
                        ("analyze", "roll out the frozen low level under noise"),
                        ("grid", "hyper-parameter grid search"),
                        ("eval", "evaluate a checkpoint and export trajectories")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path, help="TOML config file")
        s.add_argument("--seed", type=int, default=None, help="override the config seeds")
        s.add_argument("--out-dir", type=Path, default=Path("runs"), help="artifact directory")
        s.add_argument("--checkpoint", type=Path, default=None,
                       help="source checkpoint (required for transfer, analyze, eval)")
        if name == "transfer":
            s.add_argument("--ff-checkpoint", type=Path, default=None,
                           help="pretrained feedforward policy for the init-FF baseline")
        if name == "eval":
            s.add_argument("--episodes", type=int, default=None, help="evaluation episodes")
    return p


def _need_checkpoint(args):
    if args.checkpoint is None:
        raise UsageError(f"{args.command} requires --checkpoint")
    return load_checkpoint(args.checkpoint)


def _seeds(args, cfg) -> list[int]:
    return [args.seed] if args.seed is not None else list(cfg.experiment["seeds"])


def _seed_dir(out: Path, seed: int, many: bool) -> Path:
    return out / f"seed{seed}" if many else out


def cmd_pretrain(args, cfg) -> None:
    plan = ExperimentPlan.from_config(cfg, seed=args.seed, phase="pretrain")
    seeds = _seeds(args, cfg)
    for seed in seeds:
        res = pretrain(plan, seed, _seed_dir(args.out_dir, seed, len(seeds) > 1))
        print(f"seed {seed}: {res.train.episodes} episodes, best eval return "
              f"{res.train.best_return:.3f}, random-policy return "
              f"{res.random_baseline.mean_return:.3f}")


def cmd_transfer(args, cfg) -> None:
    ck = _need_checkpoint(args)
    ff_source = None
    if "init-FF" in cfg.experiment["baselines"]:
        if args.ff_checkpoint is None:
            raise UsageError("the init-FF baseline requires --ff-checkpoint")
        ff_source = agent_from_checkpoint(load_checkpoint(args.ff_checkpoint)).policy
    plan = ExperimentPlan.from_config(cfg, source=ck, seed=args.seed, phase="transfer")
    seeds = _seeds(args, cfg)
    for seed in seeds:
        out = _seed_dir(args.out_dir, seed, len(seeds) > 1)
        frozen = extract_and_freeze(ck, np.random.default_rng(seed), plan.learner.sigma_init)
        res = transfer(plan, frozen, seed, out)
        print(f"seed {seed}: hierarchy best success {res.best_success:.2f}, "
              f"final return {res.train.final_return():.3f}")
        for kind in plan.baselines:
            b = train_baseline(plan, kind, seed, out, source_ff=ff_source)
            print(f"seed {seed}: {kind} best success {b.best_success:.2f}, "
                  f"final return {b.train.final_return():.3f}")


def cmd_analyze(args, cfg) -> None:
    ck = _need_checkpoint(args)
    plan = ExperimentPlan.from_config(cfg, source=ck, seed=args.seed, phase="analyze-noise")
    seed = plan.seeds[0]
    frozen = extract_and_freeze(ck, np.random.default_rng(seed))
    analysis = analyze_noise(frozen, plan.params, plan.sigma_in, plan.k_list,
                             plan.trajectory_length, plan.n_trajectories, plan.action_noise,
                             seed, plan.analysis_action_sigma)
    write_analysis(analysis, plan.params.n_links, args.out_dir)
    for row in analysis.summary_rows():
        print(f"{row['condition']}: mean displacement {row['mean_displacement']:.3f}, "
              f"endpoint spread {row['endpoint_spread']:.3f}")


def cmd_grid(args, cfg) -> None:
    source = load_checkpoint(args.checkpoint) if args.checkpoint is not None else None
    plan = ExperimentPlan.from_config(cfg, source=source, seed=args.seed, phase="grid")
    result = grid_search(plan, args.out_dir)
    write_grid(result, plan.learner, args.out_dir)
    for cid, score in result.ranking():
        print(f"cell {cid}: mean final return {score:.3f}")
    failed = [r for r in result.rows if r.error]
    if failed:
        print(f"{len(failed)} run(s) failed; see log", file=sys.stderr)


def cmd_eval(args, cfg) -> None:
    ck = _need_checkpoint(args)
    agent = agent_from_checkpoint(ck)
    plan = ExperimentPlan.from_config(cfg, seed=args.seed, phase="pretrain")
    obs_dim = plan.params.proprio_dim + plan.task.task_dim
    expected = ck.meta.get("obs_dim") or ck.meta["highs"][0]["obs_dim"]
    if expected != obs_dim:
        raise UsageError(f"checkpoint expects {expected} observation features, "
                         f"config task provides {obs_dim}")
    n = args.episodes or plan.eval_episodes
    episodes = record_episodes(agent, plan.task, plan.params, n, plan.seeds[0])
    rows = [[i, float(r.sum()), len(r), bool(r.sum() > 0)] for i, (_, r) in enumerate(episodes)]
    csvio.write_csv_atomic(args.out_dir / "eval.csv", ("episode", "return", "length", "success"),
                           rows)
    csvio.write_trajectories(args.out_dir / "eval_trajectories.csv", plan.params.n_links,
                             episodes)
    print(f"mean return {np.mean([r[1] for r in rows]):.3f} over {n} episodes")


COMMANDS = {"pretrain": cmd_pretrain, "transfer": cmd_transfer, "analyze": cmd_analyze,
            "grid": cmd_grid, "eval": cmd_eval}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
