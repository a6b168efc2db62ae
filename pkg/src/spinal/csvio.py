"""Atomic CSV writers for trajectories, learning curves and result tables."""

from __future__ import annotations

import csv
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CURVE_HEADER = ("episode", "mean_return", "mean_episode_length", "sigma_mean")
GRID_HEADER = ("cell_id", "alpha", "beta", "lambda", "lambda_prime", "W", "seed", "final_return")


def write_csv_atomic(path: str | os.PathLike, header: Sequence[str],
                     rows: Iterable[Sequence]) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def trajectory_header(n_links: int) -> list[str]:
    return (["t", "x_head", "y_head"] + [f"phi_{i + 1}" for i in range(n_links)]
            + [f"q_{i + 1}" for i in range(n_links - 1)] + ["reward"])


def trajectory_rows(q: np.ndarray, rewards: np.ndarray) -> list[list]:
    """Rows for one trajectory: ``q`` is ``(T, N+2)``, ``rewards`` ``(T,)``."""
    joints = np.diff(q[:, 2:], axis=1)
    return [[t, *q[t, :2], *q[t, 2:], *joints[t], rewards[t]] for t in range(len(q))]


def write_trajectories(path, n_links: int, trajectories: Sequence[tuple[np.ndarray, np.ndarray]]) -> Path:
    """Concatenated trajectories; ``t`` restarts at 0 for each one."""
    rows: list[list] = []
    for q, r in trajectories:
        rows.extend(trajectory_rows(q, r))
    return write_csv_atomic(path, trajectory_header(n_links), rows)


def write_curve(path, points) -> Path:
    return write_csv_atomic(path, CURVE_HEADER, [
        (p.episode, p.mean_return, p.mean_episode_length, p.sigma_mean) for p in points
    ])
