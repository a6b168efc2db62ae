"""Experimental protocol: pretraining, freezing, transfer, noise analysis, grid search."""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import csvio
from .checkpoint import Checkpoint, CheckpointError, assign, save_checkpoint
from .learner import EvalResult, LearnerConfig, TrainResult, evaluate_policy, train_loop
from .nets import (
    SIGMA_MAX,
    SIGMA_MIN,
    ClockedHierarchy,
    FeedForwardAgent,
    FeedForwardPolicy,
    HighLevelController,
    LowLevelController,
    make_baseline,
)
from .swimmer import SwimmerParams, SwimmerState, advance, initial_state
from .tasks import Observation, SwimEnv, TaskSpec

log = logging.getLogger(__name__)

PHASES = ("pretrain", "transfer", "analyze-noise", "grid")

DEFAULT_POLICY = {
    "ll_hidden": 150, "hl_encoder": 30, "hl_cells": 10, "transfer_encoder": 100,
    "transfer_cells": 50, "control_dim": 10, "ff_hidden": 300, "K": 10,
    "sigma_min": SIGMA_MIN, "sigma_max": SIGMA_MAX, "sigma_init": 0.3, "hl_sigma_init": 0.4,
}


@dataclass
class ExperimentPlan:
    phase: str
    task: TaskSpec
    params: SwimmerParams = field(default_factory=lambda: SwimmerParams(n_links=3))
    policy: dict = field(default_factory=lambda: dict(DEFAULT_POLICY))
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    seeds: list[int] = field(default_factory=lambda: [0])
    episodes: int = 20000
    eval_every: int = 500
    eval_episodes: int = 32
    source: Checkpoint | None = None
    agent: str = "hierarchy"
    baselines: list[str] = field(default_factory=list)
    grid: dict[str, list] = field(default_factory=dict)
    grid_seeds: int = 5
    sigma_in: list[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.8])
    k_list: list[int] = field(default_factory=lambda: [10, 1])
    action_noise: list[float] = field(default_factory=lambda: [0.2, 0.4, 0.8])
    analysis_action_sigma: float = 0.3
    trajectory_length: int = 2000
    n_trajectories: int = 20
    stop_success: float | None = None
    config_hash: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase in ("transfer", "analyze-noise") and self.source is None:
            raise ValueError(f"{self.phase} needs a source checkpoint")
        if self.phase == "grid" and not any(self.grid.values()):
            raise ValueError("grid phase needs at least one non-empty grid axis")
        if self.agent not in ("hierarchy", "ff"):
            raise ValueError(f"unknown agent kind {self.agent!r}")
        self.policy = {**DEFAULT_POLICY, **self.policy}

    @classmethod
    def from_config(cls, cfg, source: Checkpoint | None = None, seed: int | None = None,
                    phase: str | None = None) -> "ExperimentPlan":
        e = cfg.experiment
        return cls(
            phase=phase or e["phase"], task=cfg.task_spec(), params=cfg.swimmer_params(),
            policy=dict(cfg.policy), learner=cfg.learner_config(),
            seeds=[seed] if seed is not None else list(e["seeds"]), episodes=e["episodes"],
            eval_every=e["eval_every"], eval_episodes=e["eval_episodes"], source=source,
            agent=e.get("agent", "hierarchy"), baselines=list(e["baselines"]),
            grid=dict(cfg.grid), grid_seeds=e["grid_seeds"], sigma_in=list(e["sigma_in"]),
            k_list=list(e["k_list"]), action_noise=list(e["action_noise"]),
            analysis_action_sigma=e["analysis_action_sigma"],
            trajectory_length=e["trajectory_length"], n_trajectories=e["n_trajectories"],
            stop_success=e["stop_success"], config_hash=cfg.digest)

    @property
    def sigma_bounds(self) -> tuple[float, float]:
        return (self.policy["sigma_min"], self.policy["sigma_max"])


def env_factory(task: TaskSpec, params: SwimmerParams) -> Callable[..., SwimEnv]:
    def make(n_envs: int = 1, seed: int | None = None, auto_reset: bool = False) -> SwimEnv:
        return SwimEnv(task, params, n_envs=n_envs, seed=seed, auto_reset=auto_reset)
    return make


def _action_dim(params: SwimmerParams) -> int:
    return params.n_links - 1


# -- agent (de)serialization -------------------------------------------------


def agent_arrays(agent) -> dict[str, np.ndarray]:
    return {k: v.value.copy() for k, v in agent.named_parameters().items()}


def agent_meta(agent, plan: ExperimentPlan, phase: str, episodes: int) -> dict:
    p = plan.params
    meta = {
        "phase": phase, "episodes": int(episodes), "config_hash": plan.config_hash,
        "task": plan.task.kind, "n_links": p.n_links, "proprio_dim": p.proprio_dim,
        "action_dim": _action_dim(p), "sigma_bounds": list(plan.sigma_bounds),
    }
    if isinstance(agent, FeedForwardAgent):
        pol = agent.policy
        meta.update(agent="ff", obs_dim=pol.obs_dim, ff_hidden=pol.l1.n_out)
    else:
        meta.update(agent="hierarchy", K=agent.K, ll_hidden=agent.low.hidden,
                    control_dim=agent.low.control_dim,
                    highs=[{"obs_dim": h.obs_dim, "encoder": h.encoder.n_out, "cells": h.cells,
                            "stochastic": h.stochastic} for h in agent.highs])
    return meta


def make_checkpoint(agent, plan: ExperimentPlan, phase: str, episodes: int,
                    arrays: dict[str, np.ndarray] | None = None) -> Checkpoint:
    return Checkpoint(agent_meta(agent, plan, phase, episodes),
                      arrays if arrays is not None else agent_arrays(agent))


def _low_from_meta(meta: dict, rng) -> LowLevelController:
    try:
        return LowLevelController(meta["proprio_dim"], meta["action_dim"], meta["ll_hidden"],
                                  meta["control_dim"], rng=rng,
                                  sigma_bounds=tuple(meta.get("sigma_bounds",
                                                              (SIGMA_MIN, SIGMA_MAX))))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks {exc.args[0]!r}") from None


def agent_from_checkpoint(ck: Checkpoint, n_rows: int = 1):
    """Rebuild the full agent stored in ``ck`` with its trained parameters."""
    meta = ck.meta
    rng = np.random.default_rng(0)
    bounds = tuple(meta.get("sigma_bounds", (SIGMA_MIN, SIGMA_MAX)))
    if meta.get("agent") == "ff":
        pol = FeedForwardPolicy(meta["obs_dim"], meta["action_dim"], meta["ff_hidden"], rng=rng,
                                sigma_bounds=bounds)
        agent = FeedForwardAgent(pol, n_rows)
    elif meta.get("agent") == "hierarchy":
        low = _low_from_meta(meta, rng)
        highs = [HighLevelController(h["obs_dim"], h["encoder"], h["cells"], h["stochastic"],
                                     meta["control_dim"], rng=rng, sigma_bounds=bounds)
                 for h in meta["highs"]]
        mode = "stochastic" if highs and highs[0].stochastic else "deterministic"
        agent = ClockedHierarchy(low, highs, meta["K"], mode, n_rows=n_rows)
    else:
        raise CheckpointError("checkpoint metadata has no agent description")
    assign(agent.named_parameters(), ck.arrays)
    return agent


# -- pretraining -------------------------------------------------------------


def build_pretrain_agent(plan: ExperimentPlan, rng: np.random.Generator):
    p, pol, task = plan.params, plan.policy, plan.task
    obs_dim = p.proprio_dim + task.task_dim
    if plan.agent == "ff":
        return FeedForwardAgent(FeedForwardPolicy(obs_dim, _action_dim(p), pol["ff_hidden"],
                                                  pol["sigma_init"], rng, plan.sigma_bounds))
    low = LowLevelController(p.proprio_dim, _action_dim(p), pol["ll_hidden"], pol["control_dim"],
                             pol["sigma_init"], rng, plan.sigma_bounds)
    highs = [HighLevelController(obs_dim, pol["hl_encoder"], pol["hl_cells"], False,
                                 pol["control_dim"], rng=rng, sigma_bounds=plan.sigma_bounds)
             for _ in range(task.n_subtasks)]
    return ClockedHierarchy(low, highs, pol["K"], "deterministic")


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    final_checkpoint: Checkpoint
    train: TrainResult
    random_baseline: EvalResult
    agent: object = field(repr=False)


def random_policy_baseline(plan: ExperimentPlan, n_episodes: int, seed: int) -> EvalResult:
    """Mean return of uniform random actions in ``[-1, 1]``."""
    env = SwimEnv(plan.task, plan.params, n_envs=n_episodes, seed=seed)
    env.reset(seed=seed)
    rng = np.random.default_rng(seed)
    done = np.zeros(n_episodes, dtype=bool)
    while not done.any():
        _, _, done, info = env.step(rng.uniform(-1, 1, (n_episodes, _action_dim(plan.params))))
    ret = info["episode_return"]
    return EvalResult(float(ret.mean()), float(info["t"].mean()), float(info["success"].mean()),
                      float("nan"), ret)


def pretrain(plan: ExperimentPlan, seed: int | None = None, out_dir: Path | None = None,
             on_eval=None) -> PretrainResult:
    """Train the full hierarchy (deterministic high level) on the shaped task.

    The returned checkpoint holds the parameters from the best evaluation;
    ``final_checkpoint`` holds the last ones.
    """
    if plan.task.kind not in ("pretrain-target", "multi-track"):
        raise ValueError(f"pretraining needs a shaped task, got {plan.task.kind!r}")
    seed = plan.seeds[0] if seed is None else seed
    rng = np.random.default_rng(seed)
    agent = build_pretrain_agent(plan, rng)
    baseline = random_policy_baseline(plan, plan.eval_episodes, seed + 1)
    result = _train(agent, plan, seed, out_dir, "pretrain_curve.csv", on_eval)
    final = make_checkpoint(agent, plan, "pretrain", result.episodes)
    best = make_checkpoint(agent, plan, "pretrain", result.episodes, result.best_params)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "pretrain.ckpt", best.arrays, best.meta)
        save_checkpoint(Path(out_dir) / "pretrain_final.ckpt", final.arrays, final.meta)
    return PretrainResult(best, final, result, baseline, agent)


def _train(agent, plan: ExperimentPlan, seed: int, out_dir, curve_name: str, on_eval=None,
           learner: LearnerConfig | None = None) -> TrainResult:
    make_env = env_factory(plan.task, plan.params)
    points = []
    curve_path = Path(out_dir) / curve_name if out_dir is not None else None

    def logged(point):
        points.append(point)
        if curve_path is not None:
            csvio.write_curve(curve_path, points)
        if on_eval:
            on_eval(point)

    stop = None
    if plan.stop_success is not None:
        stop = lambda pt: pt.success_rate >= plan.stop_success  # noqa: E731
    res = train_loop(agent, make_env, learner or plan.learner, plan.episodes, seed=seed,
                     eval_every=plan.eval_every, eval_episodes=plan.eval_episodes,
                     eval_seed=10_000 + seed, on_eval=logged, stop_when=stop)
    if res.best_params is None:
        res.best_params = agent_arrays(agent)
    return res


def record_episodes(agent, task: TaskSpec, params: SwimmerParams, n_episodes: int, seed: int,
                    deterministic: bool = True) -> list[tuple[np.ndarray, np.ndarray]]:
    """Run one episode per row and return ``(q, rewards)`` per episode.

    ``q`` holds the configuration after every step.
    """
    env = SwimEnv(task, params, n_envs=n_episodes, seed=seed, auto_reset=True)
    obs = env.reset(seed=seed)
    agent.resize(n_episodes)
    agent.reset_rows(None, task_index=env.subtask)
    rng = np.random.default_rng(seed)
    qs, rs = [], []
    finished = np.zeros(n_episodes, dtype=bool)
    ends = np.zeros(n_episodes, dtype=np.int64)
    while not finished.all():
        out = agent.act(obs, rng, deterministic=deterministic)
        obs, reward, done, info = env.step(out.action)
        q = env.state.q.copy()
        if done.any():
            q[done] = info["final_state"][done]
        qs.append(q)
        rs.append(reward)
        ends[done & ~finished] = len(qs)
        finished |= done
        if done.any():
            agent.reset_rows(done, task_index=env.subtask)
    q_all, r_all = np.stack(qs, axis=1), np.stack(rs, axis=1)
    return [(q_all[i, :ends[i]], r_all[i, :ends[i]]) for i in range(n_episodes)]


# -- freezing ----------------------------------------------------------------


@dataclass
class FrozenLowLevel:
    """Pretrained low-level controller with immutable weights and a fresh sigma layer."""

    low: LowLevelController
    source_meta: dict

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.low.named_parameters().items()
                if not k.startswith("sigma.")}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.frozen_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def extract_and_freeze(ck: Checkpoint, rng: np.random.Generator | None = None,
                       sigma_init: float = 0.3) -> FrozenLowLevel:
    """Discard the high level, freeze the low level, re-initialize its sigma layer."""
    if ck.meta.get("agent") != "hierarchy":
        raise CheckpointError("checkpoint does not contain a hierarchical controller")
    rng = rng if rng is not None else np.random.default_rng()
    low = _low_from_meta(ck.meta, rng)
    assign(low.named_parameters(), ck.section("low."))
    low.freeze()
    low.reinit_sigma(rng, sigma_init)
    return FrozenLowLevel(low, dict(ck.meta))


# -- transfer ----------------------------------------------------------------


@dataclass
class TransferResult:
    kind: str
    train: TrainResult
    agent: object = field(repr=False)
    digest_before: str = ""
    digest_after: str = ""

    @property
    def best_success(self) -> float:
        return max((p.success_rate for p in self.train.curve), default=0.0)


def build_transfer_agent(plan: ExperimentPlan, frozen: FrozenLowLevel,
                         rng: np.random.Generator) -> ClockedHierarchy:
    p, pol = plan.params, plan.policy
    if frozen.low.proprio_dim != p.proprio_dim or frozen.low.action_dim != _action_dim(p):
        raise ValueError(
            f"frozen controller expects {frozen.low.proprio_dim} proprioceptive features and "
            f"{frozen.low.action_dim} actions; task body gives {p.proprio_dim} and "
            f"{_action_dim(p)}")
    obs_dim = p.proprio_dim + plan.task.task_dim
    high = HighLevelController(obs_dim, pol["transfer_encoder"], pol["transfer_cells"], True,
                               frozen.low.control_dim, pol["hl_sigma_init"], rng,
                               plan.sigma_bounds)
    return ClockedHierarchy(frozen.low, [high], pol["K"], "stochastic")


def transfer(plan: ExperimentPlan, frozen: FrozenLowLevel, seed: int | None = None,
             out_dir: Path | None = None, on_eval=None) -> TransferResult:
    """Train a fresh stochastic high level (plus the LL sigma layer) on a sparse task."""
    seed = plan.seeds[0] if seed is None else seed
    rng = np.random.default_rng(seed)
    agent = build_transfer_agent(plan, frozen, rng)
    before = frozen.digest()
    res = _train(agent, plan, seed, out_dir, "transfer_curve.csv", on_eval)
    after = frozen.digest()
    if before != after:
        raise AssertionError("frozen low-level weights changed during transfer")
    if out_dir is not None:
        ck = make_checkpoint(agent, plan, "transfer", res.episodes, res.best_params)
        save_checkpoint(Path(out_dir) / "transfer.ckpt", ck.arrays, ck.meta)
    return TransferResult("hierarchy", res, agent, before, after)


def train_baseline(plan: ExperimentPlan, kind: str, seed: int | None = None,
                   out_dir: Path | None = None, source_ff: FeedForwardPolicy | None = None,
                   on_eval=None) -> TransferResult:
    seed = plan.seeds[0] if seed is None else seed
    rng = np.random.default_rng(seed)
    p, pol = plan.params, plan.policy
    agent = make_baseline(kind, p.proprio_dim + plan.task.task_dim, _action_dim(p),
                          proprio_dim=p.proprio_dim, source=source_ff,
                          sigma_init=plan.learner.sigma_init, hidden=pol["ff_hidden"],
                          ll_hidden=pol["ll_hidden"], hl_encoder=pol["transfer_encoder"],
                          hl_cells=pol["transfer_cells"], K=pol["K"], rng=rng)
    res = _train(agent, plan, seed, out_dir, f"baseline_{kind}_curve.csv", on_eval)
    return TransferResult(kind, res, agent)


# -- noise analysis ----------------------------------------------------------


@dataclass
class Condition:
    label: str
    kind: str  # "llc" or "iid"
    sigma: float
    K: int
    q: np.ndarray = field(repr=False)  # (n, T + 1, N + 2)

    @property
    def head(self) -> np.ndarray:
        return self.q[:, :, :2]

    def displacement(self) -> np.ndarray:
        return np.linalg.norm(self.head[:, -1] - self.head[:, 0], axis=1)

    def max_displacement(self) -> float:
        return float(np.linalg.norm(self.head - self.head[:, :1], axis=2).max())

    def body_frame_endpoints(self) -> np.ndarray:
        """Final head offsets expressed in each trajectory's initial head frame."""
        d = self.head[:, -1] - self.head[:, 0]
        th = self.q[:, 0, 2]
        c, s = np.cos(th), np.sin(th)
        return np.stack([d[:, 0] * c + d[:, 1] * s, -d[:, 0] * s + d[:, 1] * c], axis=1)

    def endpoint_spread(self) -> float:
        e = self.body_frame_endpoints()
        return float(np.sqrt(((e - e.mean(axis=0)) ** 2).sum(axis=1).mean()))

    def heading_spread(self) -> float:
        """Circular standard deviation of the endpoint bearing in the initial head frame."""
        e = self.body_frame_endpoints()
        ang = np.arctan2(e[:, 1], e[:, 0])
        r = float(np.hypot(np.cos(ang).mean(), np.sin(ang).mean()))
        return math.sqrt(-2.0 * math.log(max(r, 1e-300)))

    def summary(self) -> dict:
        d = self.displacement()
        return {"condition": self.label, "kind": self.kind, "sigma": self.sigma, "K": self.K,
                "mean_displacement": float(d.mean()), "max_displacement": self.max_displacement(),
                "heading_spread": self.heading_spread(),
                "endpoint_spread": self.endpoint_spread()}


SUMMARY_HEADER = ("condition", "kind", "sigma", "K", "mean_displacement", "max_displacement",
                  "heading_spread", "endpoint_spread")


@dataclass
class NoiseAnalysis:
    conditions: list[Condition]

    def get(self, kind: str, sigma: float, K: int = 1) -> Condition:
        for c in self.conditions:
            if c.kind == kind and math.isclose(c.sigma, sigma) and (kind == "iid" or c.K == K):
                return c
        raise KeyError(f"no {kind} condition with sigma={sigma}, K={K}")

    def summary_rows(self) -> list[dict]:
        return [c.summary() for c in self.conditions]


def _initial_states(params: SwimmerParams, n: int, seed: int,
                    joint_range: float = math.radians(30.0)) -> SwimmerState:
    rng = np.random.default_rng(seed)
    heading = rng.uniform(-math.pi, math.pi, n)
    joints = rng.uniform(-joint_range, joint_range, (n, params.n_links - 1))
    return initial_state(params, np.zeros((n, 2)), heading, joints)


def _rollout(params: SwimmerParams, state: SwimmerState, T: int, policy) -> np.ndarray:
    qs = np.empty((state.q.shape[0], T + 1, params.n_coords))
    qs[:, 0] = state.q
    for t in range(T):
        state = advance(params, state, policy(state))
        qs[:, t + 1] = state.q
    return qs


def analyze_noise(frozen: FrozenLowLevel, params: SwimmerParams, sigma_in=(0.0, 0.2, 0.4, 0.8),
                  k_list=(10, 1), T: int = 2000, n_trajectories: int = 20,
                  action_noise=(0.2, 0.4, 0.8), seed: int = 0,
                  action_sigma: float = 0.3) -> NoiseAnalysis:
    """Roll out the frozen controller under held control noise, plus i.i.d. action noise.

    Every condition starts from the same randomized configurations at the
    origin and draws its noise from the same seed.
    """
    from .swimmer import proprioception

    low = frozen.low
    if low.proprio_dim != params.proprio_dim:
        raise ValueError("frozen controller does not match the swimmer body")
    start = _initial_states(params, n_trajectories, seed)
    out = []
    for K in k_list:
        for s in sigma_in:
            agent = ClockedHierarchy(low, [], K=K, mode="noise", sigma_in=s, n_rows=n_trajectories)
            agent.action_sigma = action_sigma
            rng = np.random.default_rng(seed + 1)
            empty = np.zeros((n_trajectories, 0))

            def policy(st, agent=agent, rng=rng):
                return agent.act(Observation(proprioception(params, st), empty), rng).action

            q = _rollout(params, start.copy(), T, policy)
            out.append(Condition(f"llc_sigma{s:g}_K{K}", "llc", float(s), int(K), q))
    for s in action_noise:
        rng = np.random.default_rng(seed + 1)
        shape = (n_trajectories, params.n_links - 1)
        q = _rollout(params, start.copy(), T, lambda st, rng=rng: s * rng.standard_normal(shape))
        out.append(Condition(f"iid_sigma{s:g}", "iid", float(s), 1, q))
    return NoiseAnalysis(out)


def write_analysis(analysis: NoiseAnalysis, n_links: int, out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for c in analysis.conditions:
        trajs = [(q, np.zeros(len(q))) for q in c.q]
        paths.append(csvio.write_trajectories(out_dir / f"traj_{c.label}.csv", n_links, trajs))
    rows = [[r[h] for h in SUMMARY_HEADER] for r in analysis.summary_rows()]
    paths.append(csvio.write_csv_atomic(out_dir / "analysis_summary.csv", SUMMARY_HEADER, rows))
    return paths


# -- grid search -------------------------------------------------------------

_AXIS_FIELDS = {"alpha": "lr", "beta": "value_scale", "lambda": "lam",
                "lambda_prime": "lam_value", "W": "window", "sigma_init": "sigma_init",
                "eta": "entropy_weight"}


@dataclass
class GridRow:
    cell_id: int
    settings: dict
    seed: int
    final_return: float
    error: str | None = None


@dataclass
class GridResult:
    rows: list[GridRow]

    def cell_means(self) -> dict[int, float]:
        cells: dict[int, list[float]] = {}
        for r in self.rows:
            cells.setdefault(r.cell_id, []).append(r.final_return)
        return {k: (float(np.mean(v)) if np.all(np.isfinite(v)) else float("-inf"))
                for k, v in cells.items()}

    def ranking(self) -> list[tuple[int, float]]:
        return sorted(self.cell_means().items(), key=lambda kv: (-kv[1], kv[0]))

    @property
    def best_cell(self) -> int:
        return self.ranking()[0][0]


def grid_cells(grid: dict[str, list]) -> list[dict]:
    axes = [(k, v) for k, v in grid.items() if v]
    unknown = [k for k, _ in axes if k not in _AXIS_FIELDS]
    if unknown:
        raise ValueError(f"unknown grid axes: {', '.join(unknown)}")
    names = [k for k, _ in axes]
    return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in axes))]


def grid_search(plan: ExperimentPlan, out_dir: Path | None = None,
                runner: Callable[[ExperimentPlan, int], TrainResult] | None = None) -> GridResult:
    """Run every grid cell for ``plan.grid_seeds`` seeds; crashes are recorded, not raised.

    Cells train the pretraining setup, or the transfer setup when ``plan``
    carries a source checkpoint.
    """
    cells = grid_cells(plan.grid)
    seeds = [plan.seeds[0] + i for i in range(plan.grid_seeds)]

    def default_runner(cell_plan: ExperimentPlan, seed: int) -> TrainResult:
        if cell_plan.source is not None:
            frozen = extract_and_freeze(cell_plan.source, np.random.default_rng(seed),
                                        cell_plan.learner.sigma_init)
            return transfer(cell_plan, frozen, seed).train
        return pretrain(cell_plan, seed).train

    runner = runner or default_runner
    rows = []
    for cid, cell in enumerate(cells):
        learner = replace(plan.learner, **{_AXIS_FIELDS[k]: v for k, v in cell.items()})
        cell_plan = replace(plan, learner=learner, phase="pretrain" if plan.source is None
                            else "transfer")
        for seed in seeds:
            try:
                final = runner(cell_plan, seed).final_return(0.1)
                err = None
            except Exception as exc:  # a crashed cell must not stop the sweep
                log.warning("grid cell %d seed %d failed: %s", cid, seed, exc)
                final, err = float("nan"), f"{type(exc).__name__}: {exc}"
            rows.append(GridRow(cid, cell, seed, final, err))
            if out_dir is not None:
                write_grid(GridResult(rows), plan.learner, out_dir)
    return GridResult(rows)


def write_grid(result: GridResult, base: LearnerConfig, out_dir: Path) -> Path:
    def val(r: GridRow, axis: str):
        return r.settings.get(axis, getattr(base, _AXIS_FIELDS[axis]))

    rows = [[r.cell_id, val(r, "alpha"), val(r, "beta"), val(r, "lambda"),
             val(r, "lambda_prime"), val(r, "W"), r.seed, r.final_return] for r in result.rows]
    return csvio.write_csv_atomic(Path(out_dir) / "grid_results.csv", csvio.GRID_HEADER, rows)
