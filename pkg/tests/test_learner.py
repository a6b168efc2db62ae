import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinal.autodiff import Tape, Tensor
from spinal.learner import (
    LearnerConfig,
    RMSProp,
    k_step_return,
    lambda_return,
    policy_loss,
    train_loop,
    value_loss,
)
from spinal.nets import FeedForwardAgent, FeedForwardPolicy, _NO_TAPE
from spinal.tasks import Observation


def explicit_mixture(rewards, values, gamma, lam, dones):
    """Normalized mixture of k-step returns, each built from scratch."""
    W = len(rewards)
    out = np.empty(W)
    for t in range(W):
        n = W - t
        kstep = []
        for k in range(n):
            total, alive = 0.0, True
            for j in range(k + 1):
                total += gamma**j * rewards[t + j]
                if dones[t + j]:
                    alive = False
                    break
            if alive:
                total += gamma ** (k + 1) * values[t + k + 1]
            kstep.append(total)
        weights = [(1 - lam) * lam**k for k in range(n - 1)] + [lam ** (n - 1)]
        out[t] = sum(w * r for w, r in zip(weights, kstep))
    return out


def test_k_step_hand_sum():
    got = k_step_return([1, 0, 1], [0.5] * 4, 0.9, k=2, t=0)
    assert got == pytest.approx(1 + 0 + 0.81 + 0.729 * 0.5, abs=1e-15)


def test_k_step_zero_is_one_step_td():
    assert k_step_return([2.0], [0.0, 3.0], 0.5, k=0, t=0) == pytest.approx(3.5)


def test_k_step_terminal_drops_bootstrap():
    assert k_step_return([2.0, 5.0], [0.0, 3.0, 7.0], 0.5, k=1, t=0, dones=[True, False]) == 2.0


@pytest.mark.parametrize("k,t", [(3, 0), (0, 3), (-1, 0)])
def test_k_step_out_of_range(k, t):
    with pytest.raises(IndexError):
        k_step_return([1.0, 1.0, 1.0], [0.0] * 4, 0.9, k=k, t=t)


def test_lambda_return_worked_example():
    r, v = [1.0, 0.0, 1.0], [0.2, 0.2, 0.2, 0.0]
    dones = [False, False, True]
    got = lambda_return(r, v, 0.9, 0.5, dones)
    np.testing.assert_allclose(got, explicit_mixture(r, v, 0.9, 0.5, dones), rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 0.999), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_lambda_return_equals_explicit_mixture(gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=10), rng.normal(size=11)
    dones = rng.random(10) < 0.15
    got = lambda_return(r, v, gamma, lam, dones)
    np.testing.assert_allclose(got, explicit_mixture(r, v, gamma, lam, dones), rtol=0, atol=1e-12)


def test_lambda_zero_is_one_step_td():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=10), rng.normal(size=11)
    np.testing.assert_allclose(lambda_return(r, v, 0.9, 0.0), r + 0.9 * v[1:], atol=1e-15)


def test_lambda_one_terminal_window_is_monte_carlo():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=10), rng.normal(size=11)
    dones = np.zeros(10, dtype=bool)
    dones[-1] = True
    mc = np.array([sum(0.9**j * r[t + j] for j in range(10 - t)) for t in range(10)])
    np.testing.assert_allclose(lambda_return(r, v, 0.9, 1.0, dones), mc, atol=1e-12)


def test_lambda_return_batched_columns_are_independent():
    rng = np.random.default_rng(2)
    r, v = rng.normal(size=(6, 3)), rng.normal(size=(7, 3))
    d = rng.random((6, 3)) < 0.3
    batched = lambda_return(r, v, 0.95, 0.8, d)
    for j in range(3):
        np.testing.assert_array_equal(batched[:, j], lambda_return(r[:, j], v[:, j], 0.95, 0.8, d[:, j]))


def test_lambda_return_needs_bootstrap():
    with pytest.raises(ValueError):
        lambda_return(np.zeros(3), np.zeros(3), 0.9, 0.5)


# -- losses --


def _normal_logp(tape, a, mu, sigma):
    return tape.gaussian_logp(Tensor(a), mu, Tensor(sigma), axis=1)


def test_zero_advantage_gives_zero_loss_and_gradient():
    mu = Tensor(np.zeros((4, 2)), requires_grad=True)
    tape = Tape()
    logp = _normal_logp(tape, np.ones((4, 2)), mu, np.ones((4, 2)))
    ent = Tensor(np.zeros(4))
    loss = policy_loss(tape, logp, ent, np.full(4, 3.0), np.full(4, 3.0))
    assert loss.item() == 0.0
    np.testing.assert_array_equal(tape.backward(loss)[mu], 0.0)


def test_unit_advantage_gradient_is_normal_score():
    a, sigma = np.array([[0.7, -0.2]]), np.array([[0.5, 2.0]])
    mu = Tensor(np.array([[0.1, 0.3]]), requires_grad=True)
    tape = Tape()
    loss = policy_loss(tape, _normal_logp(tape, a, mu, sigma), Tensor(np.zeros(1)), [1.0], [0.0])
    score = (a - mu.value) / sigma**2
    np.testing.assert_allclose(-tape.backward(loss)[mu], score, rtol=1e-14)


def test_positive_advantage_step_moves_mean_toward_action():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a, m = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
        mu = Tensor(m, requires_grad=True)
        tape = Tape()
        loss = policy_loss(tape, _normal_logp(tape, a, mu, np.full((1, 3), 0.4)),
                           Tensor(np.zeros(1)), [1.0], [0.0])
        delta = -0.01 * tape.backward(loss)[mu]
        assert float((delta * (a - m)).sum()) > 0


def test_entropy_bonus_lowers_loss():
    sigma = Tensor(np.full((2, 1), 0.5), requires_grad=True)
    tape = Tape()
    logp = _normal_logp(tape, np.zeros((2, 1)), Tensor(np.zeros((2, 1))), np.full((2, 1), 0.5))
    ent = tape.sum(tape.log(sigma), axis=1)
    loss = policy_loss(tape, logp, ent, np.zeros(2), np.zeros(2), entropy_weight=0.1)
    assert loss.item() == pytest.approx(-0.1 * 2 * np.log(0.5))
    np.testing.assert_allclose(tape.backward(loss)[sigma], -0.1 / 0.5)


def test_advantage_on_tape_is_rejected():
    v = Tensor(np.zeros(2), requires_grad=True)
    tape = Tape()
    with pytest.raises(AssertionError):
        policy_loss(tape, Tensor(np.zeros(2)), Tensor(np.zeros(2)), np.zeros(2), v)
    with pytest.raises(AssertionError):
        value_loss(tape, Tensor(np.zeros((2, 1))), tape.scale(v, 1.0))


@pytest.mark.parametrize("v,target,expected", [(0.0, 2.0, 2.0), (1.5, 1.5, 0.0), (-1.0, 1.0, 2.0)])
def test_value_loss_half_squared_error(v, target, expected):
    V = Tensor([[v]], requires_grad=True)
    tape = Tape()
    loss = value_loss(tape, V, [[target]])
    assert loss.item() == pytest.approx(expected)
    assert tape.backward(loss)[V][0, 0] == pytest.approx(v - target)


# -- optimizer --


def _params(*shapes):
    rng = np.random.default_rng(0)
    return {f"p{i}": Tensor(rng.normal(size=s), requires_grad=True) for i, s in enumerate(shapes)}


def test_zero_gradient_leaves_parameters_unchanged():
    ps = _params((3,), (2, 2))
    before = {k: p.value.copy() for k, p in ps.items()}
    opt = RMSProp(ps)
    for _ in range(5):
        opt.step({k: np.zeros_like(p.value) for k, p in ps.items()})
    for k, p in ps.items():
        np.testing.assert_array_equal(p.value, before[k])


def test_clipping_halves_norm_80_gradient():
    opt = RMSProp(_params((2,)), clip_norm=40.0)
    g = {"p0": np.array([48.0, 64.0])}
    clipped, norm = opt.clip(g)
    assert norm == pytest.approx(80.0)
    np.testing.assert_allclose(clipped["p0"], g["p0"] / 2, rtol=1e-15)


def test_constant_gradient_step_follows_closed_form():
    ps = _params((4,))
    g = np.array([0.5, -2.0, 1e-1, 3.0])
    opt = RMSProp(ps, lr=1e-3, clip_norm=None)
    for n in range(1, 401):
        before = ps["p0"].value.copy()
        opt.step({"p0": g})
        ms = g * g * (1 - 0.99**n)
        expected = 1e-3 * g / np.sqrt(ms + 1e-5)
        np.testing.assert_allclose(before - ps["p0"].value, expected, rtol=1e-9)
    # far from start the step approaches lr * sign(g) for |g|^2 >> eps
    np.testing.assert_allclose(before - ps["p0"].value, 1e-3 * np.sign(g), rtol=2e-2)


def test_non_finite_gradient_names_parameter():
    opt = RMSProp(_params((2,), (3,)))
    with pytest.raises(FloatingPointError, match="p1"):
        opt.step({"p0": np.zeros(2), "p1": np.array([0.0, np.nan, 0.0])})


def test_frozen_parameter_cannot_be_updated():
    ps = _params((2,))
    opt = RMSProp(ps)
    ps["p0"].value.flags.writeable = False
    with pytest.raises(AssertionError, match="frozen"):
        opt.step({"p0": np.ones(2)})


def test_unknown_gradient_name_rejected():
    with pytest.raises(KeyError):
        RMSProp(_params((2,))).step({"nope": np.ones(2)})


@pytest.mark.parametrize("kw", [dict(gamma=1.0), dict(lam=1.5), dict(lr=0.0), dict(value_scale=-1.0),
                                dict(entropy_weight=-0.1), dict(window=0), dict(workers=0)])
def test_config_rejects_invalid_values(kw):
    with pytest.raises(ValueError):
        LearnerConfig(**kw)


# -- training loop on a one-step bandit --


class Bandit:
    """One-step episodes with reward ``-(a - target)^2``."""

    def __init__(self, n_envs, seed, auto_reset=True, target=0.5):
        self.n_envs = n_envs
        self.subtask = np.zeros(n_envs, dtype=np.int64)
        self.target = target

    def _obs(self):
        return Observation(np.ones((self.n_envs, 1)), np.zeros((self.n_envs, 0)))

    def reset(self, seed=None):
        return self._obs()

    def step(self, a):
        r = -((a[:, 0] - self.target) ** 2)
        done = np.ones(self.n_envs, dtype=bool)
        info = {"t": np.ones(self.n_envs, dtype=np.int64), "episode_return": r,
                "success": np.zeros(self.n_envs, dtype=bool)}
        return self._obs(), r, done, info


def _bandit_agent(seed=0):
    return FeedForwardAgent(FeedForwardPolicy(1, 1, 8, 0.3, np.random.default_rng(seed)))


def _bandit_head(agent):
    mu, sigma, _ = agent.policy(_NO_TAPE, Tensor(np.ones((1, 1))))
    return mu.value[0, 0], sigma.value[0, 0]


def test_bandit_mean_converges_to_target():
    agent = _bandit_agent()
    cfg = LearnerConfig(lr=3e-3, window=1, envs_per_worker=16)
    train_loop(agent, Bandit, cfg, episodes=16 * 600, seed=0)
    mu, _ = _bandit_head(agent)
    assert mu == pytest.approx(0.5, abs=0.05)


def test_entropy_weight_monotonically_raises_sigma():
    sigmas = []
    for eta in (0.0, 0.01, 0.1):
        agent = _bandit_agent()
        cfg = LearnerConfig(lr=3e-3, window=1, envs_per_worker=16, entropy_weight=eta)
        train_loop(agent, Bandit, cfg, episodes=16 * 800, seed=0)
        sigmas.append(_bandit_head(agent)[1])
    assert sigmas[0] < sigmas[1] < sigmas[2]


def test_single_worker_run_is_bit_reproducible():
    curves = []
    for _ in range(2):
        agent = _bandit_agent(5)
        cfg = LearnerConfig(lr=3e-3, window=1, envs_per_worker=4)
        res = train_loop(agent, Bandit, cfg, episodes=200, seed=3, eval_every=40, eval_episodes=4)
        curves.append([(p.episode, p.mean_return, p.sigma_mean) for p in res.curve])
    assert curves[0] == curves[1]


@pytest.mark.parametrize("async_updates", [False, True])
def test_update_accounting_across_workers(async_updates):
    agent = _bandit_agent()
    cfg = LearnerConfig(lr=1e-3, window=1, workers=3, envs_per_worker=2,
                        async_updates=async_updates)
    res = train_loop(agent, Bandit, cfg, episodes=120, seed=0)
    assert res.total_updates == sum(res.updates_per_worker)
    assert all(n > 0 for n in res.updates_per_worker)
    assert res.episodes >= 120


class _Exploding(Bandit):
    def step(self, a):
        raise RuntimeError("simulator exploded")


def test_worker_failure_aborts_with_diagnostics():
    with pytest.raises(RuntimeError, match="worker 0.*simulator exploded"):
        train_loop(_bandit_agent(), _Exploding, LearnerConfig(window=1), episodes=10)


def test_async_worker_failure_aborts():
    cfg = LearnerConfig(window=1, workers=2, async_updates=True)
    with pytest.raises(RuntimeError, match="simulator exploded"):
        train_loop(_bandit_agent(), _Exploding, cfg, episodes=10)


def test_zero_reward_gives_flat_curve():
    class Zero(Bandit):
        def step(self, a):
            obs, r, d, info = super().step(a)
            info["episode_return"] = np.zeros(self.n_envs)
            return obs, np.zeros(self.n_envs), d, info

    res = train_loop(_bandit_agent(), Zero, LearnerConfig(window=1, envs_per_worker=4),
                     episodes=200, seed=0, eval_every=50, eval_episodes=4)
    returns = [p.mean_return for p in res.curve]
    assert returns == [0.0] * len(returns)
    assert all(np.isfinite(p.sigma_mean) for p in res.curve)
