"""Shared helpers: random agents, short rollouts and finite-difference checks."""

from __future__ import annotations

import numpy as np

from spinal.autodiff import Tape, Tensor, max_relative_error
from spinal.learner import LearnerConfig, Worker, segment_gradients
from spinal.nets import (
    ClockedHierarchy,
    FeedForwardAgent,
    FeedForwardPolicy,
    HighLevelController,
    LowLevelController,
    reparam_sample,
)
from spinal.swimmer import SwimmerParams
from spinal.tasks import SwimEnv, TaskSpec

KINDS = ("ff", "ll", "hl-deterministic", "hl-stochastic")


def random_agent(kind: str, rng: np.random.Generator, params: SwimmerParams, task: TaskSpec,
                 K: int | None = None):
    """A small randomly sized agent of the given kind."""
    obs_dim = params.proprio_dim + task.task_dim
    act = params.n_links - 1
    if kind == "ff":
        return FeedForwardAgent(FeedForwardPolicy(obs_dim, act, int(rng.integers(3, 9)),
                                                  rng.uniform(0.2, 0.6), rng))
    dc = int(rng.integers(1, 5))
    low = LowLevelController(params.proprio_dim, act, int(rng.integers(3, 9)), dc,
                             rng.uniform(0.2, 0.6), rng)
    K = int(rng.integers(1, 6)) if K is None else K
    if kind == "ll":
        return ClockedHierarchy(low, [], K=K, mode="noise", sigma_in=rng.uniform(0.1, 0.8))
    stochastic = kind == "hl-stochastic"
    high = HighLevelController(obs_dim, int(rng.integers(2, 7)), int(rng.integers(2, 6)),
                               stochastic, dc, rng.uniform(0.2, 0.6), rng, mu_init_scale=1.0)
    return ClockedHierarchy(low, [high], K=K, mode="stochastic" if stochastic else "deterministic")


def rollout_segment(agent, task: TaskSpec, params: SwimmerParams, rows: int, window: int,
                    seed: int, cfg: LearnerConfig):
    env = SwimEnv(task, params, n_envs=rows, seed=seed, auto_reset=True)
    w = Worker(0, agent, env, seed, cfg.reward_scale)
    return w.agent, w.rollout(window)


def gradient_error(agent, seg, cfg: LearnerConfig, rng: np.random.Generator,
                   n_coords: int = 8, h: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    Checks ``n_coords`` random entries of every trainable parameter array.
    """
    _, grads = segment_gradients(agent, seg, cfg)
    worst = 0.0
    for name, p in agent.trainable().items():
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = segment_gradients(agent, seg, cfg)[0]
            flat[i] = old - h
            fm = segment_gradients(agent, seg, cfg)[0]
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * h)
        worst = max(worst, max_relative_error(grads[name].reshape(-1)[idx], numeric, floor=1e-7))
    return worst


def directional_error(agent, seg, cfg: LearnerConfig, rng: np.random.Generator,
                      h: float = 1e-5) -> float:
    """Worst relative error of directional derivatives, one random direction per array.

    Cheaper than coordinate checks and still sensitive to every entry.
    """
    _, grads = segment_gradients(agent, seg, cfg)
    worst = 0.0
    for name, p in agent.trainable().items():
        v = rng.standard_normal(p.value.shape)
        v /= np.linalg.norm(v)
        old = p.value.copy()
        p.value = old + h * v
        fp = segment_gradients(agent, seg, cfg)[0]
        p.value = old - h * v
        fm = segment_gradients(agent, seg, cfg)[0]
        p.value = old
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, max_relative_error(np.sum(grads[name] * v), numeric, floor=1e-7))
    return worst


def pathwise_quadratic_gradient(mu: np.ndarray, sigma: np.ndarray, k: np.ndarray, n: int,
                                seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample pathwise gradients of ``r = -||c - k||^2`` wrt ``mu``; returns mean and s.e."""
    rng = np.random.default_rng(seed)
    mu_t = Tensor(np.broadcast_to(mu, (n, mu.size)).copy(), requires_grad=True)
    sig_t = Tensor(np.broadcast_to(sigma, (n, mu.size)).copy())
    tape = Tape()
    c = reparam_sample(tape, mu_t, sig_t, rng.standard_normal((n, mu.size)))
    diff = tape.sub(c, Tensor(np.broadcast_to(k, (n, mu.size)).copy()))
    reward = tape.scale(tape.sum(tape.square(diff)), -1.0)
    per_sample = tape.backward(reward)[mu_t]
    return per_sample.mean(axis=0), per_sample.std(axis=0, ddof=1) / np.sqrt(n)
