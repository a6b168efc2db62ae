"""Actor-critic learner with lambda-returns and pathwise high-level gradients."""

from __future__ import annotations

import copy
import logging
import threading
import traceback
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor

log = logging.getLogger(__name__)


# -- returns -----------------------------------------------------------------


def k_step_return(rewards, values, gamma: float, k: int, t: int, dones=None) -> float:
    """``sum_{j<=k} gamma^j r_{t+j} + gamma^{k+1} V_{t+k+1}``, cut at terminal steps.

    ``values`` has one more entry than ``rewards``; ``dones[i]`` marks that the
    episode ended after step ``i``, so nothing past it contributes.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(rewards)
    if len(values) != n + 1:
        raise ValueError(f"need {n + 1} values for {n} rewards, got {len(values)}")
    dones = np.zeros(n, dtype=bool) if dones is None else np.asarray(dones, dtype=bool)
    if t < 0 or k < 0:
        raise IndexError(f"negative index t={t}, k={k}")
    total, disc = 0.0, 1.0
    for j in range(k + 1):
        i = t + j
        if i >= n:
            raise IndexError(f"k-step return needs reward {i}, window has {n}")
        total += disc * rewards[i]
        disc *= gamma
        if dones[i]:
            return total
    return total + disc * values[t + k + 1]


def lambda_return(rewards, values, gamma: float, lam: float, dones=None) -> np.ndarray:
    """Truncated lambda-returns by backward recursion.

    ``R_t = r_t + gamma [(1 - lam) V_{t+1} + lam R_{t+1}]`` with
    ``R_W = V_W``.  ``rewards`` is ``(W, ...)``, ``values`` ``(W + 1, ...)``
    with the window-boundary bootstrap last.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    W = rewards.shape[0]
    if values.shape[0] != W + 1:
        raise ValueError(f"need {W + 1} values for {W} rewards, got {values.shape[0]}")
    cont = np.ones_like(rewards) if dones is None else 1.0 - np.asarray(dones, dtype=np.float64)
    out = np.empty_like(rewards)
    nxt = values[W]
    for t in range(W - 1, -1, -1):
        nxt = rewards[t] + gamma * cont[t] * ((1.0 - lam) * values[t + 1] + lam * nxt)
        out[t] = nxt
    return out


# -- losses ------------------------------------------------------------------


def _detached(x, what: str) -> np.ndarray:
    if isinstance(x, Tensor):
        if x._needs_grad:
            raise AssertionError(f"{what} must not carry gradient")
        return x.value
    return np.asarray(x, dtype=np.float64)


def policy_loss(tape: Tape, logp: Tensor, entropy: Tensor, returns, values,
                entropy_weight: float = 0.0) -> Tensor:
    """``-sum log pi * (R - V) - eta * sum H`` with constant advantages."""
    adv = _detached(returns, "returns") - _detached(values, "values")
    adv = adv.reshape(logp.shape)
    loss = tape.scale(tape.sum(tape.mul(logp, Tensor(adv))), -1.0)
    if entropy_weight:
        loss = tape.sub(loss, tape.scale(tape.sum(entropy), entropy_weight))
    return loss


def value_loss(tape: Tape, values: Tensor, targets) -> Tensor:
    """``0.5 * sum (target - V)^2``; only ``values`` is differentiated."""
    tgt = _detached(targets, "value targets").reshape(values.shape)
    return tape.scale(tape.sum(tape.square(tape.sub(Tensor(tgt), values))), 0.5)


# -- optimizer ---------------------------------------------------------------


class RMSProp:
    """Shared-statistics RMSProp with global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, decay: float = 0.99,
                 eps: float = 1e-5, clip_norm: float | None = 40.0):
        self.params = dict(params)
        self.lr, self.decay, self.eps, self.clip_norm = lr, decay, eps, clip_norm
        self.ms = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.steps = 0

    def clip(self, grads: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], float]:
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
        return grads, norm

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update in place; returns the pre-clip gradient norm."""
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            p = self.params[name]
            if not p.requires_grad or not p.value.flags.writeable:
                raise AssertionError(f"parameter {name!r} is frozen")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        grads, norm = self.clip(grads)
        for name, g in grads.items():
            ms = self.ms[name]
            ms *= self.decay
            ms += (1.0 - self.decay) * g * g
            self.params[name].value -= self.lr * g / np.sqrt(ms + self.eps)
        self.steps += 1
        return norm


# -- rollouts ----------------------------------------------------------------


def shaping_term(before, after, gamma: float, terminal=None) -> np.ndarray:
    """Potential-based shaping ``gamma * Phi(s') - Phi(s)`` with ``Phi = p / (1 - gamma)``.

    ``p`` is the task's per-state potential.  A terminal successor has zero
    potential.  Added to a reward equal to ``p(s')`` the result is
    ``(p(s') - p(s)) / (1 - gamma)``: the same optimal policies, but
    without the large state-dependent offset the critic would otherwise
    have to fit before any advantage signal emerges.
    """
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if terminal is not None:
        after = np.where(terminal, 0.0, after)
    return (gamma * after - before) / (1.0 - gamma)


@dataclass
class LearnerConfig:
    gamma: float = 0.99
    lam: float = 0.95
    lam_value: float = 0.95
    lr: float = 1e-3
    value_scale: float = 0.5
    entropy_weight: float = 0.0
    window: int = 20
    workers: int = 1
    envs_per_worker: int = 16
    sigma_init: float = 0.3
    reward_scale: float = 1.0
    rms_decay: float = 0.99
    rms_eps: float = 1e-5
    clip_norm: float = 40.0
    async_updates: bool = False
    bootstrap_time_limit: bool = True
    potential_shaping: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name in ("lam", "lam_value"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lr <= 0 or self.value_scale <= 0:
            raise ValueError("lr and value_scale must be positive")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be non-negative")
        if self.window < 1 or self.workers < 1 or self.envs_per_worker < 1:
            raise ValueError("window, workers and envs_per_worker must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RolloutSegment:
    """One truncated-BPTT window of ``W`` steps for ``B`` rows, time-major."""

    obs_p: np.ndarray
    obs_f: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    bootstrap: np.ndarray
    update: np.ndarray
    starts: np.ndarray
    c: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    task_index: np.ndarray
    h0: np.ndarray
    cell0: np.ndarray
    held_c0: np.ndarray
    eps: np.ndarray | None = None

    @property
    def window(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_rows(self) -> int:
        return self.rewards.shape[1]


def fork_agent(agent, n_rows: int):
    """Per-worker view of ``agent``: shared networks, private rollout state."""
    twin = copy.copy(agent)
    twin.resize(n_rows)
    return twin


class Worker:
    """Owns an auto-resetting environment batch and a private agent view."""

    def __init__(self, index: int, agent, env, seed: int, reward_scale: float = 1.0,
                 time_limit_gamma: float | None = None, shaping_gamma: float | None = None):
        self.index = index
        self.time_limit_gamma = time_limit_gamma
        self.shaping_gamma = shaping_gamma
        self.agent = fork_agent(agent, env.n_envs)
        self.env = env
        self.rng = np.random.default_rng(seed)
        self.reward_scale = reward_scale
        self.obs = env.reset(seed=seed + 7919)
        self.agent.reset_rows(None, task_index=env.subtask)
        self.updates = 0
        self.episodes = 0
        self.finished_returns: list[float] = []
        self.finished_lengths: list[int] = []
        self.finished_success: list[bool] = []

    def rollout(self, W: int) -> RolloutSegment:
        agent, env = self.agent, self.env
        B = env.n_envs
        h0, cell0, held0 = agent.rollout_state()
        cols = {k: [] for k in ("obs_p", "obs_f", "actions", "rewards", "dones", "values",
                                "update", "starts", "c", "mu", "sigma", "task_index", "eps")}
        for _ in range(W):
            obs = self.obs
            cols["starts"].append(agent.t == 0)
            cols["task_index"].append(agent.task_index.copy())
            out = agent.act(obs, self.rng)
            nxt, reward, done, info = env.step(out.action)
            cols["obs_p"].append(obs.proprio)
            cols["obs_f"].append(obs.full)
            cols["actions"].append(out.action)
            if self.shaping_gamma is not None and "potential" in info:
                reward = reward + shaping_term(*info["potential"], self.shaping_gamma,
                                               info.get("terminal"))
            reward = reward * self.reward_scale
            cut = info.get("truncated")
            if self.time_limit_gamma is not None and cut is not None and cut.any():
                # an episode cut by the time limit is not terminal: fold the
                # value of its last observation into the final reward
                v_end = agent.value_of(info["final_observation"])
                reward = np.where(cut, reward + self.time_limit_gamma * v_end, reward)
            cols["rewards"].append(reward)
            cols["dones"].append(done)
            cols["values"].append(out.value)
            cols["update"].append(out.update)
            cols["c"].append(out.c)
            cols["mu"].append(out.mu)
            cols["sigma"].append(out.sigma)
            cols["eps"].append(out.eps)
            if done.any():
                idx = np.flatnonzero(done)
                self.episodes += idx.size
                self.finished_returns.extend(info["episode_return"][idx].tolist())
                self.finished_lengths.extend(info["t"][idx].tolist())
                self.finished_success.extend(info["success"][idx].tolist())
                agent.reset_rows(done, task_index=env.subtask)
            self.obs = nxt
        bootstrap = agent.value_of(self.obs)
        eps = cols.pop("eps")
        seg = {k: np.stack(v) for k, v in cols.items()}
        return RolloutSegment(**seg, bootstrap=bootstrap, h0=h0, cell0=cell0, held_c0=held0,
                              eps=None if eps[0] is None else np.stack(eps))


def segment_gradients(agent, seg: RolloutSegment, cfg: LearnerConfig):
    """Loss and named gradients for one segment.

    The total loss is ``policy + beta * value``, summed over time and
    averaged over rows.
    """
    tape = Tape()
    logp, entropy, values_t = agent.evaluate(tape, seg)
    all_values = np.concatenate([seg.values, seg.bootstrap[None]], axis=0)
    ret_pi = lambda_return(seg.rewards, all_values, cfg.gamma, cfg.lam, seg.dones)
    ret_v = lambda_return(seg.rewards, all_values, cfg.gamma, cfg.lam_value, seg.dones)
    lp = policy_loss(tape, logp, entropy, ret_pi.reshape(-1), seg.values.reshape(-1),
                     cfg.entropy_weight)
    lv = value_loss(tape, values_t, ret_v.reshape(-1, 1))
    total = tape.scale(tape.add(lp, tape.scale(lv, cfg.value_scale)), 1.0 / seg.n_rows)
    grads = tape.backward(total)
    named = {name: grads.get(p, np.zeros_like(p.value)) for name, p in agent.trainable().items()}
    return total.item(), named


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalResult:
    mean_return: float
    mean_length: float
    success_rate: float
    sigma_mean: float
    returns: np.ndarray = field(repr=False)


def evaluate_policy(agent, make_env: Callable[..., object], n_episodes: int, seed: int,
                    deterministic: bool = True) -> EvalResult:
    """Run ``n_episodes`` in parallel on a snapshot copy of ``agent``."""
    snap = copy.deepcopy(agent)
    env = make_env(n_envs=n_episodes, seed=seed, auto_reset=True)
    snap.resize(n_episodes)
    obs = env.reset(seed=seed)
    snap.reset_rows(None, task_index=env.subtask)
    rng = np.random.default_rng(seed)
    finished = np.zeros(n_episodes, dtype=bool)
    returns = np.zeros(n_episodes)
    lengths = np.zeros(n_episodes)
    success = np.zeros(n_episodes, dtype=bool)
    sig_sum, sig_n = 0.0, 0
    while not finished.all():
        out = snap.act(obs, rng, deterministic=deterministic)
        sig_sum += float(out.sigma[~finished].sum())
        sig_n += int((~finished).sum()) * out.sigma.shape[1]
        obs, _, done, info = env.step(out.action)
        newly = done & ~finished
        returns[newly] = info["episode_return"][newly]
        lengths[newly] = info["t"][newly]
        success[newly] = info["success"][newly]
        finished |= done
        if done.any():
            snap.reset_rows(done, task_index=env.subtask)
    return EvalResult(float(returns.mean()), float(lengths.mean()), float(success.mean()),
                      sig_sum / max(sig_n, 1), returns)


# -- training loop -----------------------------------------------------------


@dataclass
class CurvePoint:
    episode: int
    mean_return: float
    mean_episode_length: float
    sigma_mean: float
    success_rate: float


@dataclass
class TrainResult:
    curve: list[CurvePoint]
    updates_per_worker: list[int]
    total_updates: int
    episodes: int
    train_returns: list[float]
    best_params: dict[str, np.ndarray] | None = None
    best_return: float = float("-inf")

    def final_return(self, fraction: float = 0.1) -> float:
        """Mean evaluation return over the last ``fraction`` of the curve."""
        if not self.curve:
            return float("nan")
        n = max(1, int(round(len(self.curve) * fraction)))
        return float(np.mean([p.mean_return for p in self.curve[-n:]]))


def _param_snapshot(agent) -> dict[str, np.ndarray]:
    return {k: v.value.copy() for k, v in agent.named_parameters().items()}


def train_loop(agent, make_env: Callable[..., object], cfg: LearnerConfig, episodes: int,
               seed: int = 0, eval_every: int | None = None, eval_episodes: int = 16,
               eval_seed: int = 10_000, on_eval: Callable[[CurvePoint], None] | None = None,
               stop_when: Callable[[CurvePoint], bool] | None = None) -> TrainResult:
    """Train ``agent`` in place until ``episodes`` episodes have finished.

    Workers own private environments; gradients are applied to the shared
    parameters under one lock.  By default workers take turns in a fixed
    order, which makes a run bit-reproducible for a given seed;
    ``cfg.async_updates`` runs them as free threads instead.
    """
    params = agent.trainable()
    if not params:
        raise ValueError("agent has no trainable parameters")
    opt = RMSProp(params, cfg.lr, cfg.rms_decay, cfg.rms_eps, cfg.clip_norm)
    seeds = np.random.SeedSequence(seed).spawn(cfg.workers)
    workers = [
        Worker(i, agent,
               make_env(n_envs=cfg.envs_per_worker, seed=int(s.generate_state(1)[0]),
                        auto_reset=True),
               int(s.generate_state(2)[1]), cfg.reward_scale,
               cfg.gamma if cfg.bootstrap_time_limit else None,
               cfg.gamma if cfg.potential_shaping else None)
        for i, s in enumerate(seeds)
    ]
    lock = threading.Lock()
    result = TrainResult([], [0] * cfg.workers, 0, 0, [])
    next_eval = 0 if eval_every else None
    stop = threading.Event()

    def total_episodes() -> int:
        return sum(w.episodes for w in workers)

    def maybe_eval() -> None:
        nonlocal next_eval
        if next_eval is None or total_episodes() < next_eval:
            return
        ev = evaluate_policy(agent, make_env, eval_episodes, eval_seed)
        point = CurvePoint(total_episodes(), ev.mean_return, ev.mean_length, ev.sigma_mean,
                           ev.success_rate)
        result.curve.append(point)
        if ev.mean_return > result.best_return:
            result.best_return = ev.mean_return
            result.best_params = _param_snapshot(agent)
        log.info("episode %d: eval return %.3f success %.2f", point.episode,
                 point.mean_return, point.success_rate)
        if on_eval:
            on_eval(point)
        if stop_when and stop_when(point):
            stop.set()
        next_eval = total_episodes() + eval_every

    def work_once(w: Worker) -> None:
        seg = w.rollout(cfg.window)
        loss, grads = segment_gradients(w.agent, seg, cfg)
        if not np.isfinite(loss):
            raise FloatingPointError(f"worker {w.index}: non-finite loss")
        with lock:
            opt.step(grads)
            w.updates += 1

    maybe_eval()
    if cfg.async_updates and cfg.workers > 1:
        errors: list[str] = []

        def run(w: Worker) -> None:
            try:
                while not stop.is_set() and total_episodes() < episodes:
                    work_once(w)
                    with lock:
                        maybe_eval()
            except Exception:
                errors.append(f"worker {w.index}:\n{traceback.format_exc()}")
                stop.set()

        threads = [threading.Thread(target=run, args=(w,), daemon=True) for w in workers]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        if errors:
            raise RuntimeError("training aborted\n" + "\n".join(errors))
    else:
        while not stop.is_set() and total_episodes() < episodes:
            for w in workers:
                try:
                    work_once(w)
                except Exception as exc:
                    raise RuntimeError(f"training aborted in worker {w.index}: {exc}") from exc
            maybe_eval()

    if eval_every and (not result.curve or result.curve[-1].episode != total_episodes()):
        next_eval = 0
        maybe_eval()
    result.updates_per_worker = [w.updates for w in workers]
    result.total_updates = opt.steps
    result.episodes = total_episodes()
    for w in workers:
        result.train_returns.extend(w.finished_returns)
    return result
