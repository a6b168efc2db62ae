"""Acceptance suite: one test per criterion, summarized at the end of the run.

The pretrained low level used by criteria 4 to 7 is trained once from
``configs/pretrain.toml`` and cached under the pytest cache directory,
keyed on the config text and the package source.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
from gradutil import (
    KINDS,
    directional_error,
    pathwise_quadratic_gradient,
    random_agent,
    rollout_segment,
)

import spinal
from spinal.autodiff import Tensor
from spinal.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from spinal.config import load_config
from spinal.experiment import (
    ExperimentPlan,
    analyze_noise,
    extract_and_freeze,
    pretrain,
    train_baseline,
    transfer,
)
from spinal.learner import LearnerConfig, lambda_return
from spinal.nets import _NO_TAPE, tau
from spinal.swimmer import (
    SwimmerParams,
    SwimmerState,
    advance,
    dynamics_step,
    initial_state,
    kinetic_energy,
    proprioception,
)
from spinal.tasks import SwimEnv, TaskSpec

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"
P3 = SwimmerParams(n_links=3)


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(spinal.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def pretrained_checkpoint(request) -> Checkpoint:
    cfg = load_config(CONFIGS / "pretrain.toml")
    cache = Path(request.config.cache.mkdir("spinal-acceptance"))
    path = cache / f"pretrain-{cfg.digest}-{_source_digest()}.ckpt"
    if not path.exists():
        res = pretrain(ExperimentPlan.from_config(cfg), seed=cfg.experiment["seeds"][0])
        save_checkpoint(path, res.checkpoint.arrays, res.checkpoint.meta)
    return load_checkpoint(path)


@pytest.fixture(scope="session")
def noise_analysis(pretrained_checkpoint):
    cfg = load_config(CONFIGS / "analyze.toml")
    e = cfg.experiment
    frozen = extract_and_freeze(pretrained_checkpoint, np.random.default_rng(e["seeds"][0]))
    t0 = time.perf_counter()
    an = analyze_noise(frozen, cfg.swimmer_params(), e["sigma_in"], e["k_list"],
                       e["trajectory_length"], e["n_trajectories"], e["action_noise"],
                       e["seeds"][0], e["analysis_action_sigma"])
    return an, time.perf_counter() - t0


# -- 1 ------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradient correctness")
def test_criterion_1_gradients_match_finite_differences(record_property):
    task = TaskSpec(kind="sparse-seek", episode_length=40)
    t0 = time.perf_counter()
    errors = []
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        kind = KINDS[i % len(KINDS)]
        cfg = LearnerConfig(window=30, gamma=rng.uniform(0.9, 0.999), lam=rng.uniform(0, 1),
                            lam_value=rng.uniform(0, 1), value_scale=rng.uniform(0.1, 2.0),
                            entropy_weight=rng.uniform(0, 0.01))
        agent, seg = rollout_segment(random_agent(kind, rng, P3, task), task, P3, 2, 30,
                                     1000 + i, cfg)
        errors.append(directional_error(agent, seg, cfg, rng))
    elapsed = time.perf_counter() - t0
    record_property("max_rel_err", f"{max(errors):.2e}")
    record_property("seconds", f"{elapsed:.0f}")
    assert max(errors) < 1e-4
    assert elapsed < 120


# -- 2 ------------------------------------------------------------------------


def _mixture_oracle(r, v, gamma, lam, dones):
    """Explicit normalized sum of k-step returns, built term by term."""
    W = len(r)
    out = np.empty(W)
    for t in range(W):
        n = W - t
        total = 0.0
        for k in range(n):
            ret, alive = 0.0, True
            for j in range(k + 1):
                ret += gamma**j * r[t + j]
                if dones[t + j]:
                    alive = False
                    break
            if alive:
                ret += gamma ** (k + 1) * v[t + k + 1]
            weight = (1 - lam) * lam**k if k < n - 1 else lam ** (n - 1)
            total += weight * ret
        out[t] = total
    return out


@pytest.mark.criterion(2, "return-oracle equivalence")
def test_criterion_2_lambda_returns_equal_k_step_mixture(record_property):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        r, v = rng.normal(size=10), rng.normal(size=11)
        dones = rng.random(10) < 0.15
        gamma = rng.uniform(0, 0.999)
        lam = [0.0, 1.0][i] if i < 2 else rng.uniform(0, 1)
        got = lambda_return(r, v, gamma, lam, dones)
        worst = max(worst, np.abs(got - _mixture_oracle(r, v, gamma, lam, dones)).max())
        if lam == 0.0:
            td = r + gamma * np.where(dones, 0.0, v[1:])
            worst = max(worst, np.abs(got - td).max())
    # lambda = 1 over a window ending in a terminal is the Monte Carlo return
    dones = np.zeros(10, dtype=bool)
    dones[-1] = True
    mc = np.array([sum(0.97**j * r[t + j] for j in range(10 - t)) for t in range(10)])
    worst = max(worst, np.abs(lambda_return(r, v, 0.97, 1.0, dones) - mc).max())
    elapsed = time.perf_counter() - t0
    record_property("max_abs_err", f"{worst:.1e}")
    assert worst <= 1e-12
    assert elapsed < 10


# -- 3 ------------------------------------------------------------------------


@pytest.mark.criterion(3, "reparameterized-gradient fidelity")
def test_criterion_3_pathwise_gradient_within_three_standard_errors(record_property):
    mu = np.array([0.3, -0.2, 0.0, 0.7])
    sigma = np.array([0.4, 1.0, 0.1, 0.6])
    k = np.array([1.0, 0.5, -0.3, 0.7])
    t0 = time.perf_counter()
    mean, se = pathwise_quadratic_gradient(mu, sigma, k, 100_000, seed=3)
    analytic = 2.0 * (k - mu)  # d/dmu of -E||mu + sigma*eps - k||^2
    z = np.abs(mean - analytic) / se
    record_property("max_z", f"{z.max():.2f}")
    assert (z <= 3.0).all()
    assert time.perf_counter() - t0 < 60


# -- 4 and 5 --------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(4, "exploration claim")
def test_criterion_4_held_noise_explores_and_zero_noise_is_straightest(noise_analysis,
                                                                       record_property):
    an, seconds = noise_analysis
    held = an.get("llc", 0.4, 10).displacement().mean()
    iid = an.get("iid", 0.4).displacement().mean()
    ratio = held / iid
    spread0 = an.get("llc", 0.0, 10).heading_spread()
    others = {f"{c.sigma:g}/K{c.K}": c.heading_spread() for c in an.conditions
              if c.kind == "llc" and c.sigma > 0}
    record_property("displacement_ratio", f"{ratio:.2f}")
    record_property("spread_sigma0", f"{spread0:.2f}")
    record_property("min_spread_noisy", f"{min(others.values()):.2f}")
    record_property("analysis_seconds", f"{seconds:.0f}")
    assert ratio >= 2.0
    assert all(spread0 < s for s in others.values()), others
    assert seconds < 300


@pytest.mark.slow
def test_held_noise_outmoves_iid_noise_at_every_level(noise_analysis):
    an, _ = noise_analysis
    held = an.get("llc", 0.4, 10).displacement().mean()
    for s in (0.2, 0.4, 0.8):
        assert held >= 2 * an.get("iid", s).displacement().mean()


@pytest.mark.slow
@pytest.mark.criterion(5, "K-effect")
def test_criterion_5_longer_hold_spreads_endpoints_more(noise_analysis, record_property):
    an, _ = noise_analysis
    pairs = {s: (an.get("llc", s, 10).endpoint_spread(), an.get("llc", s, 1).endpoint_spread())
             for s in (0.2, 0.4)}
    for s, (k10, k1) in pairs.items():
        record_property(f"sigma{s:g}_K10_vs_K1", f"{k10:.2f} vs {k1:.2f}")
    assert all(k10 >= k1 for k10, k1 in pairs.values())


# -- 6 ------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(6, "transfer headline")
def test_criterion_6_hierarchy_learns_sparse_seek_where_ff_fails(pretrained_checkpoint,
                                                                  record_property):
    cfg = load_config(CONFIGS / "transfer.toml")
    seed = cfg.experiment["seeds"][0]
    plan = ExperimentPlan.from_config(cfg, source=pretrained_checkpoint)
    assert plan.task.kind == "sparse-seek" and plan.task.min_distance == 2.0
    assert plan.episodes <= 50_000
    frozen = extract_and_freeze(pretrained_checkpoint, np.random.default_rng(seed),
                                plan.learner.sigma_init)
    t0 = time.perf_counter()
    hier = transfer(plan, frozen, seed)
    used = hier.train.episodes
    # the feedforward baseline gets the episodes the hierarchy consumed
    ff_plan = ExperimentPlan.from_config(cfg, source=pretrained_checkpoint)
    ff_plan.episodes, ff_plan.stop_success = used, None
    ff = train_baseline(ff_plan, "FF-scratch", seed)
    record_property("hierarchy_best_success", f"{hier.best_success:.2f}")
    record_property("hierarchy_episodes", used)
    record_property("ff_best_success", f"{ff.best_success:.2f}")
    record_property("minutes", f"{(time.perf_counter() - t0) / 60:.0f}")
    assert hier.best_success > 0.5
    assert ff.best_success < 0.1


# -- 7 ------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(7, "freeze and protocol invariants")
def test_criterion_7_protocol_invariants(pretrained_checkpoint, tmp_path, record_property):
    t0 = time.perf_counter()
    ck = pretrained_checkpoint
    # freeze invariance through a short transfer run
    cfg = load_config(CONFIGS / "transfer.toml")
    plan = ExperimentPlan.from_config(cfg, source=ck)
    plan.episodes, plan.eval_every, plan.eval_episodes = 64, 32, 8
    frozen = extract_and_freeze(ck, np.random.default_rng(0), plan.learner.sigma_init)
    source = {k[len("low."):]: v for k, v in ck.arrays.items()
              if k.startswith("low.") and not k.startswith("low.sigma.")}
    res = transfer(plan, frozen, seed=0)
    assert res.digest_before == res.digest_after
    for k, v in frozen.frozen_arrays().items():
        assert v.tobytes() == source[k].tobytes()

    # sample-and-hold: c is constant between updates and equals mu + sigma * eps at updates
    agent = res.agent
    env = SwimEnv(plan.task, plan.params, n_envs=4, seed=5)
    obs = env.reset()
    agent.resize(4)
    agent.reset_rows(None)
    rng = np.random.default_rng(6)
    high = agent.highs[0]
    prev = None
    for t in range(1, 3 * agent.K + 2):
        h, cell = agent.h.copy(), agent.cell.copy()
        out = agent.act(obs, rng)
        if tau(t, agent.K) == t:
            assert out.update.all()
            hk, _, _ = high.step(_NO_TAPE, Tensor(obs.full), h, cell)
            mu_h, sigma_h = high.head(_NO_TAPE, hk)
            np.testing.assert_allclose(out.c, mu_h.value + sigma_h.value * out.eps,
                                       rtol=1e-15, atol=1e-15)
        else:
            assert not out.update.any()
            assert out.c.tobytes() == prev.tobytes()
        prev = out.c.copy()
        obs, _, _, _ = env.step(out.action)

    # proprioception is invariant to rigid motions of the world frame
    rng = np.random.default_rng(7)
    st_ = initial_state(P3, rng.uniform(-2, 2, (64, 2)), rng.uniform(-np.pi, np.pi, 64),
                        rng.uniform(-1, 1, (64, 2)))
    st_.qd[:] = rng.normal(size=st_.qd.shape)
    worst = 0.0
    for _ in range(20):
        a, dx, dy = rng.uniform(-np.pi, np.pi), *rng.uniform(-100, 100, 2)
        q, qd = st_.q.copy(), st_.qd.copy()
        c, s = math.cos(a), math.sin(a)
        q[:, 0], q[:, 1] = c * st_.q[:, 0] - s * st_.q[:, 1] + dx, s * st_.q[:, 0] + c * st_.q[:, 1] + dy
        qd[:, 0], qd[:, 1] = c * st_.qd[:, 0] - s * st_.qd[:, 1], s * st_.qd[:, 0] + c * st_.qd[:, 1]
        q[:, 2:] += a
        moved = SwimmerState(q, qd)
        worst = max(worst, np.abs(proprioception(P3, moved) - proprioception(P3, st_)).max())
    record_property("proprio_invariance_err", f"{worst:.1e}")
    assert worst <= 1e-10

    # simulation is bit-deterministic
    runs = []
    for _ in range(2):
        r = np.random.default_rng(8)
        s_ = st_.copy()
        for _ in range(200):
            s_ = advance(P3, s_, r.uniform(-1, 1, (64, 2)))
        runs.append(s_.q.tobytes() + s_.qd.tobytes())
    assert runs[0] == runs[1]

    # checkpoint round trip is byte-exact
    a = save_checkpoint(tmp_path / "a.ckpt", ck.arrays, ck.meta)
    back = load_checkpoint(a)
    b = save_checkpoint(tmp_path / "b.ckpt", back.arrays, back.meta)
    assert a.read_bytes() == b.read_bytes()
    elapsed = time.perf_counter() - t0
    record_property("seconds", f"{elapsed:.0f}")
    assert elapsed < 60


# -- 8 ------------------------------------------------------------------------


def _mirror(st_):
    q, qd = st_.q.copy(), st_.qd.copy()
    q[:, 1:] *= -1
    qd[:, 1:] *= -1
    return SwimmerState(q, qd)


@pytest.mark.criterion(8, "physics sanity")
def test_criterion_8_physics_sanity(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    for n in (3, 6):
        p = SwimmerParams(n_links=n)
        rest = initial_state(p, rng.uniform(-2, 2, (8, 2)), rng.uniform(-np.pi, np.pi, 8),
                             rng.uniform(-0.8, 0.8, (8, n - 1)))
        s_ = rest
        for _ in range(500):
            s_ = dynamics_step(p, s_, np.zeros((8, n - 1)))
        assert s_.q.tobytes() == rest.q.tobytes() and not s_.qd.any()

        s_ = rest.copy()
        s_.qd[:] = rng.normal(scale=0.5, size=s_.qd.shape)
        ke = kinetic_energy(p, s_)
        for _ in range(500):
            s_ = dynamics_step(p, s_, np.zeros((8, n - 1)))
            nxt = kinetic_energy(p, s_)
            assert (nxt < ke).all()
            ke = nxt

        a = rest.copy()
        a.qd[:] = rng.normal(size=a.qd.shape)
        b = _mirror(a)
        for _ in range(300):
            tau_ = rng.uniform(-1, 1, (8, n - 1))
            a, b = advance(p, a, tau_), advance(p, b, -tau_)
        m = _mirror(a)
        mirror_err = max(np.abs(m.q - b.q).max(), np.abs(m.qd - b.qd).max())
        assert mirror_err <= 1e-10

        s_ = initial_state(p, np.zeros((1, 2)), np.zeros(1), np.zeros((1, n - 1)))
        h0 = s_.head.copy()
        j = np.arange(n - 1)
        control_dt = p.dt * p.substeps
        for i in range(500):
            s_ = advance(p, s_, 0.5 * np.sin(2 * np.pi * 0.5 * i * control_dt - 0.8 * j)[None])
        moved = np.linalg.norm(s_.head - h0)
        record_property(f"gait_{n}link_body_lengths", f"{moved / p.body_length:.2f}")
        assert moved > p.body_length
    assert time.perf_counter() - t0 < 30
