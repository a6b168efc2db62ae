"""Swimmer tasks: shaped go-to-target, sparse target seeking, canyon, multi-track."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .swimmer import (
    SwimmerParams,
    SwimmerState,
    advance,
    com_velocity,
    initial_state,
    proprioception,
)

TASK_KINDS = ("pretrain-target", "sparse-seek", "canyon", "multi-track")
SUBTASKS = ("straight", "left-circle", "right-circle")

DEFAULT_CANYON = ((0.0, 0.0), (7.0, 0.0), (11.0, 3.0), (18.0, 3.0))


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "pretrain-target"
    episode_length: int = 300
    # pretrain-target
    target_distance: tuple[float, float] = (2.0, 5.0)
    # sparse-seek
    target_radius: float = 0.3
    min_distance: float = 2.0
    distance_span: float = 1.0
    view_half_angle: float = math.radians(60.0)
    # multi-track
    subtask: str | None = None
    circle_radius: float = 5.0
    speed_clip: float = 2.5
    track_weight: float = 0.5
    # canyon
    canyon_centerline: tuple[tuple[float, float], ...] = DEFAULT_CANYON
    canyon_width: float = 1.5
    exit_reward: float = 10.0
    exit_delay: int = 25
    n_rays: int = 10
    fan_angle: float = math.radians(120.0)
    ray_range: float = 5.0
    # all tasks
    init_joint_range: float = math.radians(30.0)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")
        if self.target_radius <= 0:
            raise ValueError("target_radius must be positive")
        if self.subtask is not None and self.subtask not in SUBTASKS:
            raise ValueError(f"unknown subtask {self.subtask!r}")

    @property
    def task_dim(self) -> int:
        return {"pretrain-target": 2, "sparse-seek": 3, "canyon": self.n_rays,
                "multi-track": 2}[self.kind]

    @property
    def n_subtasks(self) -> int:
        return len(SUBTASKS) if self.kind == "multi-track" else 1


def pretrain_task(**kw) -> TaskSpec:
    kw.setdefault("episode_length", 300)
    return TaskSpec(kind="pretrain-target", **kw)


def sparse_seek_task(hard: bool = False, **kw) -> TaskSpec:
    kw.setdefault("episode_length", 800)
    kw.setdefault("min_distance", 6.0 if hard else 2.0)
    return TaskSpec(kind="sparse-seek", **kw)


def canyon_task(**kw) -> TaskSpec:
    kw.setdefault("episode_length", 3000)
    return TaskSpec(kind="canyon", **kw)


def multi_track_task(**kw) -> TaskSpec:
    kw.setdefault("episode_length", 300)
    return TaskSpec(kind="multi-track", **kw)


@dataclass
class Observation:
    """Proprioceptive features plus task features, batched along axis 0."""

    proprio: np.ndarray
    task: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.proprio, self.task], axis=1)

    def __len__(self) -> int:
        return self.proprio.shape[0]


# -- geometry ----------------------------------------------------------------


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def ray_distances(origins: np.ndarray, angles: np.ndarray, walls: np.ndarray,
                  max_range: float) -> np.ndarray:
    """Distance along each ray to the nearest wall segment, capped at ``max_range``.

    origins ``(B, 2)``, angles ``(B, R)`` in world frame, walls ``(S, 4)`` as
    ``x0, y0, x1, y1``.  Returns ``(B, R)``.
    """
    dx, dy = np.cos(angles)[..., None], np.sin(angles)[..., None]
    ax, ay = walls[:, 0], walls[:, 1]
    ex, ey = walls[:, 2] - ax, walls[:, 3] - ay
    px = ax - origins[:, 0, None, None]
    py = ay - origins[:, 1, None, None]
    denom = _cross(dx, dy, ex, ey)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = _cross(px, py, ex, ey) / denom
        u = _cross(px, py, dx, dy) / denom
    hit = (denom != 0) & (t >= 0) & (u >= 0) & (u <= 1)
    t = np.where(hit, t, np.inf)
    return np.minimum(t.min(axis=-1), max_range)


def depth_strip(head: np.ndarray, heading: np.ndarray, walls: np.ndarray,
                n_rays: int = 10, fan_angle: float = math.radians(120.0),
                max_range: float = 5.0) -> np.ndarray:
    """Egocentric depth readings in ``[0, 1]``, rays ordered left to right."""
    offsets = np.linspace(fan_angle / 2, -fan_angle / 2, n_rays)
    angles = np.atleast_1d(heading)[:, None] + offsets[None, :]
    return ray_distances(np.atleast_2d(head), angles, walls, max_range) / max_range


def offset_polyline(points: np.ndarray, offset: float) -> np.ndarray:
    """Polyline shifted sideways by ``offset`` (positive = left), mitred joins."""
    seg = np.diff(points, axis=0)
    seg = seg / np.linalg.norm(seg, axis=1, keepdims=True)
    normals = np.stack([-seg[:, 1], seg[:, 0]], axis=1)
    out = np.empty_like(points)
    out[0] = points[0] + offset * normals[0]
    out[-1] = points[-1] + offset * normals[-1]
    for i in range(1, len(points) - 1):
        bis = normals[i - 1] + normals[i]
        bis /= np.linalg.norm(bis)
        out[i] = points[i] + offset / float(bis @ normals[i]) * bis
    return out


@dataclass(frozen=True)
class Canyon:
    centerline: np.ndarray
    width: float
    walls: np.ndarray = field(repr=False)
    cum_length: np.ndarray = field(repr=False)

    @classmethod
    def from_spec(cls, task: TaskSpec) -> "Canyon":
        pts = np.asarray(task.canyon_centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("canyon centerline needs at least two (x, y) points")
        half = task.canyon_width / 2
        left, right = offset_polyline(pts, half), offset_polyline(pts, -half)
        segs = [np.concatenate([left[:-1], left[1:]], axis=1),
                np.concatenate([right[:-1], right[1:]], axis=1),
                np.concatenate([left[:1], right[:1]], axis=1)]
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        return cls(pts, task.canyon_width, np.concatenate(segs, axis=0), cum)

    @property
    def length(self) -> float:
        return float(self.cum_length[-1])

    def project(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Arc-length coordinate and distance to the centreline for points ``(B, 2)``.

        Points beyond either end are projected onto the extended end segments.
        """
        a = self.centerline[:-1]
        e = np.diff(self.centerline, axis=0)
        seg_len = np.linalg.norm(e, axis=1)
        rel = p[:, None, :] - a[None]
        u = (rel * e[None]).sum(-1) / seg_len**2
        n_seg = len(seg_len)
        lo = np.where(np.arange(n_seg) == 0, -np.inf, 0.0)
        hi = np.where(np.arange(n_seg) == n_seg - 1, np.inf, 1.0)
        uc = np.clip(u, lo, hi)
        closest = a[None] + uc[..., None] * e[None]
        dist = np.linalg.norm(p[:, None, :] - closest, axis=-1)
        k = dist.argmin(axis=1)
        rows = np.arange(p.shape[0])
        s = self.cum_length[k] + uc[rows, k] * seg_len[k]
        return s, dist[rows, k]


def _egocentric(vec: np.ndarray, heading: np.ndarray) -> np.ndarray:
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([vec[:, 0] * c + vec[:, 1] * s, -vec[:, 0] * s + vec[:, 1] * c], axis=1)


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


class SwimEnv:
    """A batch of independent swimmer episodes of one task.

    With ``auto_reset`` a finished row starts a new episode on the same call
    and the returned observation belongs to the new episode; otherwise
    stepping a finished row is an error.
    """

    def __init__(self, task: TaskSpec, params: SwimmerParams | None = None,
                 n_envs: int = 1, seed: int | None = None, auto_reset: bool = False):
        self.task = task
        self.params = params or SwimmerParams()
        self.n_envs = n_envs
        self.auto_reset = auto_reset
        self.rng = np.random.default_rng(seed)
        self.canyon = Canyon.from_spec(task) if task.kind == "canyon" else None
        n = n_envs
        self.state = SwimmerState(np.zeros((n, self.params.n_coords)),
                                  np.zeros((n, self.params.n_coords)))
        self.t = np.zeros(n, dtype=np.int64)
        self.done = np.ones(n, dtype=bool)
        self.target = np.zeros((n, 2))
        self.subtask = np.zeros(n, dtype=np.int64)
        self.exit_timer = np.full(n, -1, dtype=np.int64)
        self.episode_return = np.zeros(n)

    # -- observation ----------------------------------------------------

    @property
    def proprio_dim(self) -> int:
        return self.params.proprio_dim

    @property
    def task_dim(self) -> int:
        return self.task.task_dim

    def observe(self) -> Observation:
        st = self.state
        head, heading = st.head, st.heading
        kind = self.task.kind
        if kind == "pretrain-target":
            feat = _egocentric(self.target - head, heading)
        elif kind == "sparse-seek":
            rel = self.target - head
            bearing = _wrap(np.arctan2(rel[:, 1], rel[:, 0]) - heading)
            visible = np.abs(bearing) <= self.task.view_half_angle
            ego = _egocentric(rel, heading) * visible[:, None]
            feat = np.concatenate([ego, visible[:, None].astype(np.float64)], axis=1)
        elif kind == "canyon":
            feat = depth_strip(head, heading, self.canyon.walls, self.task.n_rays,
                               self.task.fan_angle, self.task.ray_range)
        else:
            feat = self._track_features(head, heading)
        return Observation(proprioception(self.params, st), feat)

    def _track_features(self, head, heading):
        r = self.task.circle_radius
        straight = self.subtask == 0
        centre = np.zeros_like(head)
        centre[:, 1] = np.where(self.subtask == 1, r, -r)
        vec = np.where(straight[:, None], np.array([[1.0, 0.0]]), centre - head)
        return _egocentric(vec, heading)

    # -- episode control ------------------------------------------------

    def reset(self, seed: int | None = None) -> Observation:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self._reset_rows(np.ones(self.n_envs, dtype=bool))
        return self.observe()

    def _reset_rows(self, rows: np.ndarray) -> None:
        idx = np.flatnonzero(rows)
        if idx.size == 0:
            return
        task, p, rng = self.task, self.params, self.rng
        for i in idx:
            joints = rng.uniform(-task.init_joint_range, task.init_joint_range, p.n_links - 1)
            head = np.zeros(2)
            if task.kind == "canyon":
                start = np.asarray(task.canyon_centerline[0], dtype=np.float64)
                direction = np.subtract(task.canyon_centerline[1], task.canyon_centerline[0])
                heading = math.atan2(direction[1], direction[0]) + rng.uniform(-0.5, 0.5)
                head = start + (p.body_length + 0.3) * direction / np.linalg.norm(direction)
            elif task.kind == "multi-track":
                heading = 0.0
                self.subtask[i] = (SUBTASKS.index(task.subtask) if task.subtask
                                   else rng.integers(len(SUBTASKS)))
            else:
                heading = rng.uniform(-math.pi, math.pi)
            if task.kind == "pretrain-target":
                ang = rng.uniform(-math.pi, math.pi)
                dist = rng.uniform(*task.target_distance)
                self.target[i] = head + dist * np.array([math.cos(ang), math.sin(ang)])
            elif task.kind == "sparse-seek":
                ang = rng.uniform(-math.pi, math.pi)
                dist = task.min_distance + rng.uniform(0.0, task.distance_span)
                self.target[i] = head + dist * np.array([math.cos(ang), math.sin(ang)])
            s = initial_state(p, head[None], np.array([heading]), joints[None])
            self.state.q[i], self.state.qd[i] = s.q[0], s.qd[0]
        self.t[idx] = 0
        self.done[idx] = False
        self.exit_timer[idx] = -1
        self.episode_return[idx] = 0.0

    def set_state(self, state: SwimmerState) -> None:
        """Overwrite body configurations (scripted tests)."""
        self.state = state.copy()

    def step(self, action: np.ndarray):
        action = np.asarray(action, dtype=np.float64).reshape(self.n_envs, -1)
        if self.done.any():
            raise RuntimeError("step() called on a finished episode; call reset()")
        before = self.potential()
        self.state = advance(self.params, self.state, action)
        self.t += 1
        reward, terminal = self._reward()
        self.episode_return += reward
        done = terminal | (self.t >= self.task.episode_length)
        self.done = done.copy()
        info = {
            "t": self.t.copy(),
            "episode_return": self.episode_return.copy(),
            "truncated": done & ~terminal,
            "terminal": terminal,
            "success": self.episode_return > 0 if self.task.kind in ("sparse-seek", "canyon")
            else np.zeros(self.n_envs, dtype=bool),
        }
        if before is not None:
            info["potential"] = (before, self.potential())
        if self.auto_reset and done.any():
            info["final_observation"] = self.observe()
            info["final_state"] = self.state.q.copy()
            self._reset_rows(done)
        return self.observe(), reward, done, info

    def potential(self) -> np.ndarray | None:
        """Shaping potential of the current state, ``None`` if the task has none.

        For go-to-target this is the shaped reward itself, ``-dist``.
        """
        if self.task.kind != "pretrain-target":
            return None
        return -np.linalg.norm(self.state.head - self.target, axis=1)

    def _reward(self):
        task, st = self.task, self.state
        n = self.n_envs
        terminal = np.zeros(n, dtype=bool)
        head = st.head
        if task.kind == "pretrain-target":
            return -np.linalg.norm(head - self.target, axis=1), terminal
        if task.kind == "sparse-seek":
            inside = np.linalg.norm(head - self.target, axis=1) <= task.target_radius
            return inside.astype(np.float64), terminal
        if task.kind == "multi-track":
            v = com_velocity(self.params, st.q, st.qd)
            pos = head
            r = task.circle_radius
            centre = np.zeros_like(pos)
            centre[:, 1] = np.where(self.subtask == 1, r, -r)
            rel = pos - centre
            rad = np.linalg.norm(rel, axis=1)
            sign = np.where(self.subtask == 1, 1.0, -1.0)
            tangent = sign[:, None] * np.stack([-rel[:, 1], rel[:, 0]], axis=1) / np.maximum(rad, 1e-9)[:, None]
            v_circle = (v * tangent).sum(axis=1)
            circle = self.subtask != 0
            v_des = np.where(circle, v_circle, v[:, 0])
            penalty = np.where(circle, task.track_weight * (rad - r) ** 2, 0.0)
            return np.minimum(v_des, task.speed_clip) - penalty, terminal
        # canyon
        reward = np.zeros(n)
        s, dist = self.canyon.project(head)
        exited = self.exit_timer >= 0
        crossed = ~exited & (s >= self.canyon.length)
        reward[crossed] = task.exit_reward
        self.exit_timer[crossed] = 0
        self.exit_timer[exited] += 1
        terminal |= exited & (self.exit_timer >= task.exit_delay)
        outside = ~exited & ~crossed & ((dist > task.canyon_width / 2) | (s < 0))
        terminal |= outside
        return reward, terminal


def reset(task: TaskSpec, seed: int, params: SwimmerParams | None = None):
    """Single-episode reset: returns ``(SwimmerState, Observation)``."""
    env = SwimEnv(task, params, n_envs=1, seed=seed)
    obs = env.reset()
    return env.state.copy(), obs
