"""Planar N-link swimmer with anisotropic viscous friction.

Generalized coordinates per body are ``q = (x_head, y_head, phi_1..phi_N)``:
the head is the front tip of link 1 and link ``i`` extends backwards from
its front joint along ``-u(phi_i)`` with ``u(phi) = (cos phi, sin phi)``.
Joint angles are ``q_k = phi_{k+1} - phi_k``.  All state arrays carry a
leading batch axis so many bodies step together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np


@dataclass(frozen=True)
class SwimmerParams:
    n_links: int = 6
    link_length: float = 0.3
    mass: float = 1.0
    k_normal: float = 2.0
    k_tangent: float = 0.02
    dt: float = 0.01
    gain: float = 6.0
    q_max: float = math.radians(100.0)
    k_limit: float = 15.0
    d_limit: float = 1.0
    joint_damping: float = 0.1
    substeps: int = 4
    rate_scale: float = 0.1

    def __post_init__(self):
        if self.n_links < 2:
            raise ValueError("swimmer needs at least 2 links")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        for name in ("link_length", "mass", "k_normal", "k_tangent", "dt", "gain", "q_max",
                     "rate_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.joint_damping < 0 or self.k_limit < 0 or self.d_limit < 0:
            raise ValueError("damping and limit coefficients must be non-negative")

    @property
    def n_coords(self) -> int:
        return self.n_links + 2

    @property
    def control_dt(self) -> float:
        """Simulated time per environment step."""
        return self.dt * self.substeps

    @property
    def body_length(self) -> float:
        return self.n_links * self.link_length

    @property
    def proprio_dim(self) -> int:
        n = self.n_links
        return 2 * (n - 1) + 2 * n


@dataclass
class SwimmerState:
    """Batched configuration ``q`` and velocities ``qd``, both ``(B, N+2)``."""

    q: np.ndarray
    qd: np.ndarray

    def copy(self) -> "SwimmerState":
        return SwimmerState(self.q.copy(), self.qd.copy())

    @property
    def head(self) -> np.ndarray:
        return self.q[:, :2]

    @property
    def phi(self) -> np.ndarray:
        return self.q[:, 2:]

    @property
    def heading(self) -> np.ndarray:
        return self.q[:, 2]

    @property
    def joint_angles(self) -> np.ndarray:
        return np.diff(self.q[:, 2:], axis=1)

    @property
    def joint_velocities(self) -> np.ndarray:
        return np.diff(self.qd[:, 2:], axis=1)


def _chain_weights(n: int, length: float) -> np.ndarray:
    # lever arm of phi_j on the centre of link i
    w = np.tril(np.full((n, n), length), -1)
    w[np.diag_indices(n)] = length / 2
    return w


def link_centers(params: SwimmerParams, q: np.ndarray) -> np.ndarray:
    """Centre positions of every link, shape ``(B, N, 2)``."""
    w = _chain_weights(params.n_links, params.link_length)
    phi = q[:, 2:]
    dx = -np.cos(phi) @ w.T
    dy = -np.sin(phi) @ w.T
    return np.stack([q[:, :1] + dx, q[:, 1:2] + dy], axis=-1)


def link_velocities(params: SwimmerParams, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    """World-frame velocities of link centres, shape ``(B, N, 2)``."""
    w = _chain_weights(params.n_links, params.link_length)
    phi, pd = q[:, 2:], qd[:, 2:]
    vx = (np.sin(phi) * pd) @ w.T
    vy = -(np.cos(phi) * pd) @ w.T
    return np.stack([qd[:, :1] + vx, qd[:, 1:2] + vy], axis=-1)


def center_of_mass(params: SwimmerParams, q: np.ndarray) -> np.ndarray:
    return link_centers(params, q).mean(axis=1)


def com_velocity(params: SwimmerParams, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    return link_velocities(params, q, qd).mean(axis=1)


def mass_matrix(params: SwimmerParams, q: np.ndarray) -> np.ndarray:
    n, L, m = params.n_links, params.link_length, params.mass
    w = _chain_weights(n, L)
    phi = q[:, 2:]
    bsz = q.shape[0]
    jac = np.zeros((bsz, n, 2, n + 2))
    jac[:, :, 0, 0] = 1.0
    jac[:, :, 1, 1] = 1.0
    jac[:, :, 0, 2:] = w[None] * np.sin(phi)[:, None, :]
    jac[:, :, 1, 2:] = -w[None] * np.cos(phi)[:, None, :]
    mm = m * np.einsum("bikn,bikm->bnm", jac, jac)
    mm[:, 2:, 2:] += (m * L * L / 12.0) * np.eye(n)
    return mm


def kinetic_energy(params: SwimmerParams, state: SwimmerState) -> np.ndarray:
    mm = mass_matrix(params, state.q)
    return 0.5 * np.einsum("bn,bnm,bm->b", state.qd, mm, state.qd)


def proprioception(params: SwimmerParams, state: SwimmerState) -> np.ndarray:
    """Joint angles, joint rates and link-frame link velocities, ``(B, 4N-2)``.

    Contains no absolute position or orientation. Joint rates are multiplied
    by ``params.rate_scale`` so all features are of order one.
    """
    phi = state.phi
    v = link_velocities(params, state.q, state.qd)
    c, s = np.cos(phi), np.sin(phi)
    v_t = v[..., 0] * c + v[..., 1] * s
    v_n = -v[..., 0] * s + v[..., 1] * c
    local = np.stack([v_t, v_n], axis=-1).reshape(phi.shape[0], -1)
    rates = params.rate_scale * state.joint_velocities
    return np.concatenate([state.joint_angles, rates, local], axis=1)


@numba.njit(cache=True)
def _step_kernel(q, qd, torque, n, L, m, kn, kt, dt, gain, qmax, klim, dlim, jdamp, out_q,
                 out_qd):
    nc = n + 2
    inertia = m * L * L / 12.0
    krot = kn * L * L / 12.0
    jx = np.zeros((n, nc))
    jy = np.zeros((n, nc))
    mm = np.zeros((nc, nc))
    rhs = np.zeros(nc)
    c = np.zeros(n)
    s = np.zeros(n)
    for b in range(q.shape[0]):
        for j in range(n):
            c[j] = math.cos(q[b, 2 + j])
            s[j] = math.sin(q[b, 2 + j])
        jx[:, :] = 0.0
        jy[:, :] = 0.0
        for i in range(n):
            jx[i, 0] = 1.0
            jy[i, 1] = 1.0
            for j in range(i + 1):
                wij = L if j < i else 0.5 * L
                jx[i, 2 + j] = wij * s[j]
                jy[i, 2 + j] = -wij * c[j]
        for r in range(nc):
            rhs[r] = 0.0
            for k in range(nc):
                acc = 0.0
                for i in range(n):
                    acc += jx[i, r] * jx[i, k] + jy[i, r] * jy[i, k]
                mm[r, k] = m * acc
        for j in range(n):
            mm[2 + j, 2 + j] += inertia
        for i in range(n):
            vx = 0.0
            vy = 0.0
            ax = 0.0
            ay = 0.0
            for k in range(nc):
                vx += jx[i, k] * qd[b, k]
                vy += jy[i, k] * qd[b, k]
            for j in range(i + 1):
                wij = L if j < i else 0.5 * L
                w2 = qd[b, 2 + j] * qd[b, 2 + j]
                ax += wij * w2 * c[j]
                ay += wij * w2 * s[j]
            vt = vx * c[i] + vy * s[i]
            vn = -vx * s[i] + vy * c[i]
            fx = -kt * vt * c[i] + kn * vn * s[i] - m * ax
            fy = -kt * vt * s[i] - kn * vn * c[i] - m * ay
            for k in range(nc):
                rhs[k] += jx[i, k] * fx + jy[i, k] * fy
        for j in range(n):
            rhs[2 + j] -= krot * qd[b, 2 + j]
        for k in range(n - 1):
            qj = q[b, 3 + k] - q[b, 2 + k]
            tau = torque[b, k]
            if tau > 1.0:
                tau = 1.0
            elif tau < -1.0:
                tau = -1.0
            tau *= gain
            tau -= jdamp * (qd[b, 3 + k] - qd[b, 2 + k])
            excess = 0.0
            if qj > qmax:
                excess = qj - qmax
            elif qj < -qmax:
                excess = qj + qmax
            if excess != 0.0:
                tau += -klim * excess - dlim * (qd[b, 3 + k] - qd[b, 2 + k])
            rhs[3 + k] += tau
            rhs[2 + k] -= tau
        # Cholesky solve; mm is symmetric positive definite
        for r in range(nc):
            for k in range(r + 1):
                acc = mm[r, k]
                for p in range(k):
                    acc -= mm[r, p] * mm[k, p]
                if r == k:
                    mm[r, r] = math.sqrt(acc)
                else:
                    mm[r, k] = acc / mm[k, k]
        for r in range(nc):
            acc = rhs[r]
            for p in range(r):
                acc -= mm[r, p] * rhs[p]
            rhs[r] = acc / mm[r, r]
        for r in range(nc - 1, -1, -1):
            acc = rhs[r]
            for p in range(r + 1, nc):
                acc -= mm[p, r] * rhs[p]
            rhs[r] = acc / mm[r, r]
        for k in range(nc):
            v = qd[b, k] + dt * rhs[k]
            out_qd[b, k] = v
            out_q[b, k] = q[b, k] + dt * v


def dynamics_step(params: SwimmerParams, state: SwimmerState, torque: np.ndarray) -> SwimmerState:
    """Advance every body by one semi-implicit Euler step of ``params.dt``.

    ``torque`` has shape ``(B, N-1)``; entries are clipped to ``[-1, 1]`` and
    scaled by ``params.gain``.
    """
    return advance(params, state, torque, 1)


def advance(params: SwimmerParams, state: SwimmerState, torque: np.ndarray,
            substeps: int | None = None) -> SwimmerState:
    """Hold ``torque`` for ``substeps`` integration steps (default ``params.substeps``)."""
    n_sub = params.substeps if substeps is None else substeps
    torque = np.ascontiguousarray(torque, dtype=np.float64)
    bsz = state.q.shape[0]
    if torque.shape != (bsz, params.n_links - 1):
        raise ValueError(
            f"torque shape {torque.shape} does not match ({bsz}, {params.n_links - 1})"
        )
    if not np.isfinite(torque).all():
        raise FloatingPointError("non-finite torque")
    q, qd = np.ascontiguousarray(state.q), np.ascontiguousarray(state.qd)
    p = params
    for _ in range(n_sub):
        q_new = np.empty_like(q)
        qd_new = np.empty_like(qd)
        _step_kernel(q, qd, torque, p.n_links, p.link_length, p.mass, p.k_normal, p.k_tangent,
                     p.dt, p.gain, p.q_max, p.k_limit, p.d_limit, p.joint_damping, q_new, qd_new)
        q, qd = q_new, qd_new
    if not (np.isfinite(q_new).all() and np.isfinite(qd_new).all()):
        raise FloatingPointError("swimmer simulation produced a non-finite state")
    return SwimmerState(q_new, qd_new)


def initial_state(params: SwimmerParams, head: np.ndarray, heading: np.ndarray,
                  joint_angles: np.ndarray) -> SwimmerState:
    """Bodies at rest with the given head positions, headings and joint angles."""
    head = np.atleast_2d(head)
    bsz = head.shape[0]
    q = np.zeros((bsz, params.n_coords))
    q[:, :2] = head
    q[:, 2] = heading
    q[:, 3:] = heading[:, None] + np.cumsum(joint_angles, axis=1)
    return SwimmerState(q, np.zeros_like(q))
