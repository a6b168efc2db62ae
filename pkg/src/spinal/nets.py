"""Policy networks: low-level controller, recurrent high-level controller,
clocked sample-and-hold hierarchy and the feedforward baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import LOG_2PI, Tape, Tensor

SIGMA_MIN = 1e-3
SIGMA_MAX = 1.0
CONTROL_DIM = 10

MODES = ("deterministic", "stochastic", "noise")

_NO_TAPE = Tape(record=False)


def tau(t: int, K: int) -> int:
    """Most recent control update time at or before step ``t`` (1-based)."""
    if t < 1 or K < 1:
        raise ValueError(f"tau needs t >= 1 and K >= 1, got t={t}, K={K}")
    return (t - 1) // K * K + 1


def sigma_preactivation(sigma: float, lo: float = SIGMA_MIN, hi: float = SIGMA_MAX) -> float:
    """Inverse of :func:`sigma_head` for a scalar target standard deviation."""
    if not lo < sigma < hi:
        raise ValueError(f"sigma {sigma} outside ({lo}, {hi})")
    p = (sigma - lo) / (hi - lo)
    return math.log(p / (1.0 - p))


def sigma_head(tape: Tape, pre: Tensor, lo: float = SIGMA_MIN, hi: float = SIGMA_MAX) -> Tensor:
    """Map pre-activations to standard deviations in ``(lo, hi)``."""
    s = tape.sigmoid(pre)
    return tape.add(tape.scale(s, hi - lo), Tensor(np.full(s.shape, lo)))


def reparam_sample(tape: Tape, mu_h: Tensor, sigma_h: Tensor, eps) -> Tensor:
    """Control signal ``mu + sigma * eps``, differentiable in ``mu`` and ``sigma``."""
    if (sigma_h.value <= 0).any():
        raise ValueError("reparam_sample: sigma must be strictly positive")
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    return tape.add(mu_h, tape.mul(sigma_h, eps))


# -- parameter containers ----------------------------------------------------


class Module:
    """Attribute-ordered tree of named parameter tensors."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.update(m.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def trainable(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters(prefix).items() if v.requires_grad}

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False
            p._needs_grad = False
            p.value.flags.writeable = False

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(value: np.ndarray, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: float = 0.0):
        bound = 1.0 / math.sqrt(n_in)
        self.w = _param(rng.uniform(-bound, bound, (n_in, n_out)), "w")
        self.b = _param(np.full(n_out, float(bias)), "b")

    @property
    def n_in(self) -> int:
        return self.w.shape[0]

    @property
    def n_out(self) -> int:
        return self.w.shape[1]

    def __call__(self, tape: Tape, x) -> Tensor:
        return tape.bias_add(tape.matmul(x, self.w), self.b)


class LSTMCell(Module):
    """Standard LSTM with forget gate, no peepholes; gate order i, f, g, o."""

    def __init__(self, n_in: int, n_cells: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(n_in + n_cells)
        self.wx = _param(rng.uniform(-bound, bound, (n_in, 4 * n_cells)), "wx")
        self.wh = _param(rng.uniform(-bound, bound, (n_cells, 4 * n_cells)), "wh")
        b = np.zeros(4 * n_cells)
        b[n_cells:2 * n_cells] = 1.0
        self.b = _param(b, "b")

    @property
    def n_cells(self) -> int:
        return self.wh.shape[0]

    def __call__(self, tape: Tape, x, h, c) -> tuple[Tensor, Tensor]:
        n = self.n_cells
        z = tape.bias_add(tape.add(tape.matmul(x, self.wx), tape.matmul(h, self.wh)), self.b)
        i = tape.sigmoid(tape.slice(z, 0, n))
        f = tape.sigmoid(tape.slice(z, n, 2 * n))
        g = tape.tanh(tape.slice(z, 2 * n, 3 * n))
        o = tape.sigmoid(tape.slice(z, 3 * n, 4 * n))
        c_new = tape.add(tape.mul(f, c), tape.mul(i, g))
        h_new = tape.mul(o, tape.tanh(c_new))
        return h_new, c_new


class LowLevelController(Module):
    """Stateless map ``(o^P, c) -> (mu, sigma)``.

    The control signal joins only at the third hidden layer, concatenated
    with the second layer's output.
    """

    def __init__(self, proprio_dim: int, action_dim: int, hidden: int = 150,
                 control_dim: int = CONTROL_DIM, sigma_init: float = 0.3,
                 rng: np.random.Generator | None = None,
                 sigma_bounds: tuple[float, float] = (SIGMA_MIN, SIGMA_MAX)):
        rng = rng if rng is not None else np.random.default_rng()
        self.sigma_bounds = tuple(sigma_bounds)
        self.l1 = Linear(proprio_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.l3 = Linear(hidden + control_dim, hidden, rng)
        self.mu = Linear(hidden, action_dim, rng)
        self.sigma = Linear(hidden, action_dim, rng,
                            bias=sigma_preactivation(sigma_init, *self.sigma_bounds))
        self.control_dim = control_dim

    @property
    def proprio_dim(self) -> int:
        return self.l1.n_in

    @property
    def action_dim(self) -> int:
        return self.mu.n_out

    @property
    def hidden(self) -> int:
        return self.l1.n_out

    def __call__(self, tape: Tape, obs_p, c) -> tuple[Tensor, Tensor]:
        h = tape.tanh(self.l1(tape, obs_p))
        h = tape.tanh(self.l2(tape, h))
        h = tape.tanh(self.l3(tape, tape.concat([h, c], axis=1)))
        return self.mu(tape, h), sigma_head(tape, self.sigma(tape, h), *self.sigma_bounds)

    def reinit_sigma(self, rng: np.random.Generator, sigma_init: float = 0.3) -> None:
        """Fresh trainable action-sigma output layer."""
        self.sigma = Linear(self.hidden, self.action_dim, rng,
                            bias=sigma_preactivation(sigma_init, *self.sigma_bounds))


class HighLevelController(Module):
    """Perceptual encoder + LSTM core + control head + value readout.

    The value readout sees only the recurrent output and the encoded
    observation, never the emitted control signal.
    """

    def __init__(self, obs_dim: int, encoder: int = 30, cells: int = 10,
                 stochastic: bool = False, control_dim: int = CONTROL_DIM,
                 sigma_init: float = 0.4, rng: np.random.Generator | None = None,
                 sigma_bounds: tuple[float, float] = (SIGMA_MIN, SIGMA_MAX),
                 mu_init_scale: float = 0.01):
        rng = rng if rng is not None else np.random.default_rng()
        self.sigma_bounds = tuple(sigma_bounds)
        self.encoder = Linear(obs_dim, encoder, rng)
        self.lstm = LSTMCell(encoder, cells, rng)
        self.stochastic = stochastic
        if stochastic:
            # a fresh stochastic head starts as near zero-mean noise
            self.mu = Linear(cells, control_dim, rng)
            self.mu.w.value *= mu_init_scale
            self.sigma = Linear(cells, control_dim, rng,
                                bias=sigma_preactivation(sigma_init, *self.sigma_bounds))
        else:
            self.out = Linear(cells, control_dim, rng)
        self.value_head = Linear(cells + encoder, 1, rng)

    @property
    def obs_dim(self) -> int:
        return self.encoder.n_in

    @property
    def cells(self) -> int:
        return self.lstm.n_cells

    def step(self, tape: Tape, o_full, h, c) -> tuple[Tensor, Tensor, Tensor]:
        """One recurrent update; returns ``(h, c, encoded observation)``."""
        if o_full.shape[-1] != self.obs_dim:
            raise ValueError(f"high-level observation has {o_full.shape[-1]} features, "
                             f"encoder expects {self.obs_dim}")
        e = tape.tanh(self.encoder(tape, o_full))
        h, c = self.lstm(tape, e, h, c)
        return h, c, e

    def head(self, tape: Tape, h) -> tuple[Tensor, Tensor | None]:
        """``(mu^H, sigma^H)`` for a stochastic head, ``(c, None)`` otherwise."""
        if self.stochastic:
            return self.mu(tape, h), sigma_head(tape, self.sigma(tape, h), *self.sigma_bounds)
        return self.out(tape, h), None

    def value(self, tape: Tape, h, e) -> Tensor:
        return self.value_head(tape, tape.concat([h, e], axis=1))


def hl_step(hl: HighLevelController, o_full: np.ndarray, z_prev, tape: Tape | None = None):
    """``z_next = f_H(o, z_prev)`` plus the head outputs computed from ``z_next``."""
    tape = tape or _NO_TAPE
    h, c = z_prev
    h, c, _ = hl.step(tape, Tensor(o_full), h, c)
    return (h, c), hl.head(tape, h)


class FeedForwardPolicy(Module):
    """Two tanh layers over the full observation with Gaussian action and value heads."""

    def __init__(self, obs_dim: int, action_dim: int, hidden: int = 300,
                 sigma_init: float = 0.3, rng: np.random.Generator | None = None,
                 sigma_bounds: tuple[float, float] = (SIGMA_MIN, SIGMA_MAX)):
        rng = rng if rng is not None else np.random.default_rng()
        self.sigma_bounds = tuple(sigma_bounds)
        self.l1 = Linear(obs_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.mu = Linear(hidden, action_dim, rng)
        self.sigma = Linear(hidden, action_dim, rng,
                            bias=sigma_preactivation(sigma_init, *self.sigma_bounds))
        self.value_head = Linear(hidden, 1, rng)

    @property
    def obs_dim(self) -> int:
        return self.l1.n_in

    @property
    def action_dim(self) -> int:
        return self.mu.n_out

    def __call__(self, tape: Tape, obs):
        h = tape.tanh(self.l1(tape, obs))
        h = tape.tanh(self.l2(tape, h))
        mu, pre = self.mu(tape, h), self.sigma(tape, h)
        return mu, sigma_head(tape, pre, *self.sigma_bounds), self.value_head(tape, h)


# -- agents ------------------------------------------------------------------


@dataclass
class StepOutput:
    action: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    c: np.ndarray
    eps: np.ndarray | None
    update: np.ndarray
    logp: np.ndarray
    value: np.ndarray


def _row_logp(a, mu, sigma):
    z = (a - mu) / sigma
    return (-0.5 * LOG_2PI - np.log(sigma) - 0.5 * z * z).sum(axis=1)


def _entropy_rows(tape: Tape, sigma: Tensor) -> Tensor:
    d = sigma.shape[1]
    const = Tensor(np.full(sigma.shape[0], 0.5 * d * (1.0 + LOG_2PI)))
    return tape.add(tape.sum(tape.log(sigma), axis=1), const)


def _const_rows(mask: np.ndarray, width: int) -> Tensor:
    return Tensor(np.repeat(mask.astype(np.float64)[:, None], width, axis=1))


class ClockedHierarchy:
    """Low-level controller driven by sample-and-held high-level control signals.

    ``highs`` holds one high-level controller per sub-task (one for ordinary
    tasks); each batch row is driven by the controller named in
    ``task_index``.  Rollout state (recurrent state, held control signal and
    noise, per-row 1-based step counter) lives here and is per worker; the
    networks themselves may be shared.

    Modes: ``deterministic`` emits ``g_H(z)``; ``stochastic`` emits
    ``mu^H + sigma^H * eps``; ``noise`` ignores the high level and emits
    ``sigma_in * eps``.
    """

    def __init__(self, low: LowLevelController, highs, K: int = 10,
                 mode: str = "deterministic", sigma_in: float = 0.0, n_rows: int = 1):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if K < 1:
            raise ValueError("control interval K must be >= 1")
        self.low = low
        self.highs = list(highs) if isinstance(highs, (list, tuple)) else [highs]
        if mode != "noise" and not self.highs:
            raise ValueError(f"mode {mode!r} needs a high-level controller")
        if mode == "stochastic" and not all(h.stochastic for h in self.highs):
            raise ValueError("stochastic mode needs stochastic high-level heads")
        self.K = K
        self.mode = mode
        self.sigma_in = sigma_in
        self.action_sigma: float | None = None
        self.resize(n_rows)

    # parameters --------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.low.named_parameters("low.")
        for i, hl in enumerate(self.highs):
            out.update(hl.named_parameters(f"high.{i}."))
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    @property
    def cells(self) -> int:
        return self.highs[0].cells if self.highs else 1

    # rollout state -----------------------------------------------------

    def resize(self, n_rows: int) -> None:
        self.n_rows = n_rows
        self.h = np.zeros((n_rows, self.cells))
        self.cell = np.zeros((n_rows, self.cells))
        self.held_c = np.zeros((n_rows, self.low.control_dim))
        self.held_eps = np.zeros((n_rows, self.low.control_dim))
        self.t = np.zeros(n_rows, dtype=np.int64)
        self.task_index = np.zeros(n_rows, dtype=np.int64)

    def reset_rows(self, rows=None, task_index=None) -> None:
        rows = np.ones(self.n_rows, dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
        self.h[rows] = 0.0
        self.cell[rows] = 0.0
        self.held_c[rows] = 0.0
        self.held_eps[rows] = 0.0
        self.t[rows] = 0
        if task_index is not None:
            self.task_index[rows] = np.asarray(task_index)[rows]

    def snapshot(self) -> dict:
        return {"h": self.h.copy(), "cell": self.cell.copy(), "held_c": self.held_c.copy(),
                "t": self.t.copy(), "task_index": self.task_index.copy()}

    def _masks(self, task_index: np.ndarray, width: int) -> list[Tensor]:
        return [_const_rows(task_index == k, width) for k in range(len(self.highs))]

    def _high(self, tape: Tape, o_full: Tensor, h, cell, task_index: np.ndarray, eps):
        """Advance every high-level controller and blend rows by sub-task.

        Returns ``(h, cell, value, candidate c)``.
        """
        outs = []
        for hl in self.highs:
            hk, ck, ek = hl.step(tape, o_full, h, cell)
            vk = hl.value(tape, hk, ek)
            mu, sig = hl.head(tape, hk)
            cand = reparam_sample(tape, mu, sig, eps) if self.mode == "stochastic" else mu
            outs.append((hk, ck, vk, cand))
        if len(outs) == 1:
            return outs[0]
        blended = []
        for j in range(4):
            parts = [o[j] for o in outs]
            masks = self._masks(task_index, parts[0].shape[1])
            acc = tape.mul(parts[0], masks[0])
            for p, m in zip(parts[1:], masks[1:]):
                acc = tape.add(acc, tape.mul(p, m))
            blended.append(acc)
        return tuple(blended)

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False) -> StepOutput:
        """One control step for every row.

        At update times the held control signal is refreshed by the mode's
        rule; the low level then always sees ``(o^P, held c)``.
        """
        tape = _NO_TAPE
        t_next = self.t + 1
        update = (t_next - 1) % self.K == 0
        n, dc = self.n_rows, self.low.control_dim
        eps = None
        value = np.zeros(n)
        if self.mode == "noise":
            if update.any():
                draw = rng.standard_normal((n, dc))
                self.held_eps[update] = draw[update]
                self.held_c[update] = self.sigma_in * draw[update]
            eps = np.where(update[:, None], self.held_eps, 0.0)
        else:
            if self.mode == "stochastic":
                draw = np.zeros((n, dc)) if deterministic else rng.standard_normal((n, dc))
            else:
                draw = np.zeros((n, dc))
            h, cell, v, cand = self._high(tape, Tensor(obs.full), self.h, self.cell,
                                          self.task_index, draw)
            self.h, self.cell = h.value, cell.value
            value = v.value[:, 0]
            self.held_c[update] = cand.value[update]
            if self.mode == "stochastic":
                self.held_eps[update] = draw[update]
                eps = np.where(update[:, None], draw, 0.0)
        mu_t, sig_t = self.low(tape, Tensor(obs.proprio), Tensor(self.held_c))
        mu = mu_t.value
        sigma = sig_t.value if self.action_sigma is None else np.full_like(mu, self.action_sigma)
        if deterministic:
            action = mu.copy()
        else:
            action = mu + sigma * rng.standard_normal(mu.shape)
        self.t = t_next
        return StepOutput(action, mu, sigma, self.held_c.copy(), eps, update,
                          _row_logp(action, mu, sigma), value)

    def value_of(self, obs) -> np.ndarray:
        """Value estimate for the next step's observation without committing state."""
        if self.mode == "noise":
            return np.zeros(self.n_rows)
        zeros = np.zeros((self.n_rows, self.low.control_dim))
        _, _, v, _ = self._high(_NO_TAPE, Tensor(obs.full), self.h, self.cell,
                                self.task_index, zeros)
        return v.value[:, 0]

    def evaluate(self, tape: Tape, seg) -> tuple[Tensor, Tensor, Tensor]:
        """Re-run a rollout segment on ``tape``.

        Returns per-step log-likelihoods ``(W*B,)``, action entropies
        ``(W*B,)`` and values ``(W*B, 1)`` in time-major row order.  Gradients
        reach the high level pathwise through the held control signal.
        """
        W, B = seg.rewards.shape
        dc = self.low.control_dim
        h = Tensor(seg.h0)
        cell = Tensor(seg.cell0)
        held = Tensor(seg.held_c0)
        held_seq, values = [], []
        for s in range(W):
            start = seg.starts[s]
            if start.any():
                keep = _const_rows(~start, h.shape[1])
                h, cell = tape.mul(h, keep), tape.mul(cell, keep)
            upd = seg.update[s]
            if self.mode == "noise":
                cand = Tensor(seg.c[s])
                v = Tensor(np.zeros((B, 1)))
            else:
                eps = seg.eps[s] if seg.eps is not None else np.zeros((B, dc))
                h, cell, v, cand = self._high(tape, Tensor(seg.obs_f[s]), h, cell,
                                              seg.task_index[s], eps)
            if upd.all():
                held = cand
            elif upd.any():
                u = _const_rows(upd, dc)
                held = tape.add(tape.mul(cand, u), tape.mul(held, _const_rows(~upd, dc)))
            held_seq.append(held)
            values.append(v)
        c_all = tape.concat(held_seq, axis=0)
        obs_p = Tensor(seg.obs_p.reshape(W * B, -1))
        mu, sigma = self.low(tape, obs_p, c_all)
        logp = tape.gaussian_logp(Tensor(seg.actions.reshape(W * B, -1)), mu, sigma, axis=1)
        return logp, _entropy_rows(tape, sigma), tape.concat(values, axis=0)

    def rollout_state(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.h.copy(), self.cell.copy(), self.held_c.copy()


class FeedForwardAgent:
    """Memoryless agent around a :class:`FeedForwardPolicy`."""

    K = 1
    mode = "ff"

    def __init__(self, policy: FeedForwardPolicy, n_rows: int = 1):
        self.policy = policy
        self.action_sigma: float | None = None
        self.resize(n_rows)

    def named_parameters(self) -> dict[str, Tensor]:
        return self.policy.named_parameters("ff.")

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def resize(self, n_rows: int) -> None:
        self.n_rows = n_rows
        self.t = np.zeros(n_rows, dtype=np.int64)
        self.task_index = np.zeros(n_rows, dtype=np.int64)

    def reset_rows(self, rows=None, task_index=None) -> None:
        rows = np.ones(self.n_rows, dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
        self.t[rows] = 0

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False) -> StepOutput:
        mu_t, sig_t, v = self.policy(_NO_TAPE, Tensor(obs.full))
        mu = mu_t.value
        sigma = sig_t.value if self.action_sigma is None else np.full_like(mu, self.action_sigma)
        action = mu.copy() if deterministic else mu + sigma * rng.standard_normal(mu.shape)
        self.t += 1
        n = self.n_rows
        return StepOutput(action, mu, sigma, np.zeros((n, 0)), None, np.ones(n, dtype=bool),
                          _row_logp(action, mu, sigma), v.value[:, 0])

    def value_of(self, obs) -> np.ndarray:
        return self.policy(_NO_TAPE, Tensor(obs.full))[2].value[:, 0]

    def evaluate(self, tape: Tape, seg):
        W, B = seg.rewards.shape
        mu, sigma, v = self.policy(tape, Tensor(seg.obs_f.reshape(W * B, -1)))
        logp = tape.gaussian_logp(Tensor(seg.actions.reshape(W * B, -1)), mu, sigma, axis=1)
        return logp, _entropy_rows(tape, sigma), v

    def rollout_state(self):
        n = self.n_rows
        return np.zeros((n, 1)), np.zeros((n, 1)), np.zeros((n, 0))


# -- baselines ---------------------------------------------------------------

BASELINES = ("FF-scratch", "LSTM-scratch", "init-FF")


def make_baseline(kind: str, obs_dim: int, action_dim: int, *, proprio_dim: int | None = None,
                  source: FeedForwardPolicy | None = None, sigma_init: float = 0.3,
                  hidden: int = 300, ll_hidden: int = 150, hl_encoder: int = 100,
                  hl_cells: int = 50, K: int = 10, rng: np.random.Generator | None = None):
    """Build a baseline agent for a transfer task.

    ``FF-scratch``: fresh two-layer feedforward policy.  ``LSTM-scratch``: a
    fresh hierarchy with a stochastic high level, every layer trainable.
    ``init-FF``: a copy of the pretrained ``source`` policy whose first layer
    is re-initialized for ``obs_dim`` inputs.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if kind == "FF-scratch":
        return FeedForwardAgent(FeedForwardPolicy(obs_dim, action_dim, hidden, sigma_init, rng))
    if kind == "LSTM-scratch":
        if proprio_dim is None:
            raise ValueError("LSTM-scratch needs proprio_dim")
        low = LowLevelController(proprio_dim, action_dim, ll_hidden, sigma_init=sigma_init, rng=rng)
        high = HighLevelController(obs_dim, hl_encoder, hl_cells, stochastic=True, rng=rng)
        return ClockedHierarchy(low, [high], K=K, mode="stochastic")
    if kind == "init-FF":
        if source is None:
            raise ValueError("init-FF needs a pretrained feedforward policy")
        if source.action_dim != action_dim:
            raise ValueError(f"checkpoint action dim {source.action_dim} != task action dim {action_dim}")
        hidden = source.l1.n_out
        pol = FeedForwardPolicy(obs_dim, action_dim, hidden, sigma_init, rng)
        for name in ("l2", "mu", "sigma", "value_head"):
            src = getattr(source, name)
            dst = getattr(pol, name)
            dst.w = _param(src.w.value.copy(), "w")
            dst.b = _param(src.b.value.copy(), "b")
        return FeedForwardAgent(pol)
    raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
