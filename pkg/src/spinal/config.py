"""TOML experiment configuration with a strict schema.

Four sections: ``[env]``, ``[policy]``, ``[learner]``, ``[experiment]`` (plus
the optional ``[experiment.grid]`` axes table).  Unknown keys, wrong types and
out-of-range numbers are rejected with the line and column of the offending
key.  ``describe_schema()`` renders the schema as text.
"""

from __future__ import annotations

import hashlib
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .learner import LearnerConfig
from .nets import BASELINES
from .swimmer import SwimmerParams
from .tasks import DEFAULT_CANYON, SUBTASKS, TASK_KINDS, TaskSpec

PHASES = ("pretrain", "transfer", "analyze-noise", "grid")
GRID_AXES = ("alpha", "beta", "lambda", "lambda_prime", "W", "sigma_init", "eta")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, col: int | None = None,
                 source: str = "<config>"):
        self.line, self.col, self.source = line, col, source
        where = f"{source}:{line}:{col}: " if line is not None else f"{source}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | bool | str | floats | ints | strs | points
    default: Any = None
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    hi_open: bool = False
    choices: tuple = ()
    doc: str = ""
    required: bool = False


def _r(kind, default, lo=None, hi=None, doc="", lo_open=False, hi_open=False, **kw):
    return Key(kind, default, lo, hi, lo_open, hi_open, doc=doc, **kw)


SCHEMA: dict[str, dict[str, Key]] = {
    "env": {
        "n_links": _r("int", 3, 2, 12, "number of swimmer links"),
        "link_length": _r("float", 0.3, 0, 5, "link length (m)", lo_open=True),
        "mass": _r("float", 1.0, 0, 100, "mass per link (kg)", lo_open=True),
        "k_normal": _r("float", 2.0, 0, 1000, "normal viscous friction", lo_open=True),
        "k_tangent": _r("float", 0.02, 0, 1000, "tangential viscous friction", lo_open=True),
        "dt": _r("float", 0.01, 0, 0.1, "integration step (s)", lo_open=True),
        "substeps": _r("int", 4, 1, 100, "integration steps per environment step"),
        "joint_damping": _r("float", 0.1, 0, 100, "viscous damping on joint rates"),
        "rate_scale": _r("float", 0.1, 0, 10, "joint-rate observation scale", lo_open=True),
        "gain": _r("float", 6.0, 0, 100, "torque per unit action (N m)", lo_open=True),
        "q_max_deg": _r("float", 100.0, 0, 180, "soft joint limit (deg)", lo_open=True),
        "k_limit": _r("float", 15.0, 0, 1e4, "joint-limit spring stiffness"),
        "d_limit": _r("float", 1.0, 0, 1e3, "joint-limit damping"),
        "task": Key("str", "pretrain-target", choices=TASK_KINDS, doc="task kind"),
        "episode_length": _r("int", None, 1, 10**6, "episode length (default per task)"),
        "hard": Key("bool", False, doc="sparse-seek hard variant (d_min 6 m)"),
        "target_radius": _r("float", 0.3, 0, 10, "target region radius (m)", lo_open=True),
        "min_distance": _r("float", None, 0, 100, "sparse-seek d_min (m)"),
        "distance_span": _r("float", 1.0, 0, 100, "sparse-seek distance range above d_min"),
        "target_distance": _r("floats", [2.0, 5.0], 0, 100, "pretrain target radius range"),
        "view_half_angle_deg": _r("float", 60.0, 0, 180, "target visibility half-angle", lo_open=True),
        "subtask": Key("str", None, choices=SUBTASKS, doc="fix the multi-track sub-task"),
        "circle_radius": _r("float", 5.0, 0, 100, "multi-track circle radius", lo_open=True),
        "speed_clip": _r("float", 2.5, 0, 100, "multi-track speed clip", lo_open=True),
        "track_weight": _r("float", 0.5, 0, 100, "multi-track radius penalty weight"),
        "canyon_centerline": _r("points", [list(p) for p in DEFAULT_CANYON], doc="canyon polyline"),
        "canyon_width": _r("float", 1.5, 0, 100, "canyon width (m)", lo_open=True),
        "n_rays": _r("int", 10, 1, 256, "depth-strip pixels"),
        "fan_angle_deg": _r("float", 120.0, 0, 360, "depth-strip fan angle", lo_open=True, hi_open=True),
        "ray_range": _r("float", 5.0, 0, 100, "depth-strip range (m)", lo_open=True),
    },
    "policy": {
        "ll_hidden": _r("int", 150, 1, 4096, "low-level hidden units per layer"),
        "hl_encoder": _r("int", 30, 1, 4096, "pretraining encoder width"),
        "hl_cells": _r("int", 10, 1, 4096, "pretraining LSTM cells"),
        "transfer_encoder": _r("int", 100, 1, 4096, "transfer encoder width"),
        "transfer_cells": _r("int", 50, 1, 4096, "transfer LSTM cells"),
        "control_dim": _r("int", 10, 1, 1024, "control-signal width"),
        "ff_hidden": _r("int", 300, 1, 4096, "feedforward baseline width"),
        "K": _r("int", 10, 1, 10**4, "control interval"),
        "sigma_min": _r("float", 1e-3, 0, 1, "lower sigma bound", lo_open=True, hi_open=True),
        "sigma_max": _r("float", 1.0, 0, 100, "upper sigma bound", lo_open=True),
        "sigma_init": _r("float", 0.3, 0, 100, "initial action sigma", lo_open=True),
        "hl_sigma_init": _r("float", 0.4, 0, 100, "initial control-signal sigma", lo_open=True),
    },
    "learner": {
        "gamma": _r("float", 0.99, 0, 1, "discount", hi_open=True),
        "lam": _r("float", 0.95, 0, 1, "policy lambda"),
        "lam_value": _r("float", 0.95, 0, 1, "value lambda"),
        "lr": _r("float", 1e-3, 0, 1, "learning rate", lo_open=True),
        "value_scale": _r("float", 0.5, 0, 100, "value-loss weight", lo_open=True),
        "entropy_weight": _r("float", 0.0, 0, 10, "entropy bonus weight"),
        "window": _r("int", 20, 1, 10**4, "BPTT window"),
        "workers": _r("int", 1, 1, 256, "worker count"),
        "envs_per_worker": _r("int", 16, 1, 4096, "environments per worker"),
        "reward_scale": _r("float", 1.0, 0, 1e3, "reward multiplier", lo_open=True),
        "rms_decay": _r("float", 0.99, 0, 1, "RMSProp decay", hi_open=True),
        "rms_eps": _r("float", 1e-5, 0, 1, "RMSProp epsilon", lo_open=True),
        "clip_norm": _r("float", 40.0, 0, 1e6, "global gradient-norm clip", lo_open=True),
        "async_updates": Key("bool", False, doc="free-running worker threads"),
        "bootstrap_time_limit": Key("bool", True, doc="bootstrap episodes cut by the time limit"),
        "potential_shaping": Key("bool", True,
                                 doc="optimize the potential-based form of a shaped reward"),
    },
    "experiment": {
        "phase": Key("str", None, choices=PHASES, doc="experiment phase", required=True),
        "agent": Key("str", "hierarchy", choices=("hierarchy", "ff"),
                     doc="pretraining architecture (ff feeds the init-FF baseline)"),
        "seeds": _r("ints", [0], 0, 2**31 - 1, "run seeds"),
        "episodes": _r("int", 20000, 1, 10**8, "training episode budget"),
        "eval_every": _r("int", 500, 1, 10**8, "episodes between evaluations"),
        "eval_episodes": _r("int", 32, 1, 10**5, "episodes per evaluation"),
        "baselines": Key("strs", [], choices=BASELINES, doc="baselines to train alongside"),
        "sigma_in": _r("floats", [0.0, 0.2, 0.4, 0.8], 0, 100, "analysis control-noise levels"),
        "k_list": _r("ints", [10, 1], 1, 10**4, "analysis control intervals"),
        "action_noise": _r("floats", [0.2, 0.4, 0.8], 0, 100, "i.i.d. action-noise levels"),
        "analysis_action_sigma": _r("float", 0.3, 0, 1, "LL action sigma during analysis"),
        "trajectory_length": _r("int", 2000, 1, 10**6, "analysis trajectory length"),
        "n_trajectories": _r("int", 20, 1, 10**5, "analysis trajectories per condition"),
        "grid_seeds": _r("int", 5, 1, 1000, "seeds per grid cell"),
        "stop_success": _r("float", None, 0, 1, "stop once evaluation success reaches this"),
    },
    "experiment.grid": {
        "alpha": _r("floats", None, 0, 1, "learning rates", lo_open=True),
        "beta": _r("floats", None, 0, 100, "value-loss weights", lo_open=True),
        "lambda": _r("floats", None, 0, 1, "policy lambdas"),
        "lambda_prime": _r("floats", None, 0, 1, "value lambdas"),
        "W": _r("ints", None, 1, 10**4, "BPTT windows"),
        "sigma_init": _r("floats", None, 0, 100, "initial action sigmas", lo_open=True),
        "eta": _r("floats", None, 0, 10, "entropy weights"),
    },
}


def describe_schema() -> str:
    out = []
    for sec, keys in SCHEMA.items():
        out.append(f"[{sec}]")
        for name, k in keys.items():
            rng = ""
            if k.lo is not None or k.hi is not None:
                rng = f" {'(' if k.lo_open else '['}{k.lo}, {k.hi}{')' if k.hi_open else ']'}"
            ch = f" one of {', '.join(k.choices)}" if k.choices else ""
            req = " (required)" if k.required else f" = {k.default!r}"
            out.append(f"  {name}: {k.kind}{rng}{ch}{req}  # {k.doc}")
    return "\n".join(out)


# -- source locations ----------------------------------------------------------

_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-\s\"]+?)\s*\]\s*(#.*)?$")


def _locate(text: str, section: str | None, key: str | None = None) -> tuple[int, int]:
    current = ""
    for i, line in enumerate(text.splitlines(), 1):
        m = _HEADER.match(line)
        if m:
            current = re.sub(r"\s+", "", m.group(1)).replace('"', "")
            if key is None and current == section:
                return i, line.index("[") + 1
            continue
        if key is not None and current == (section or ""):
            km = re.match(rf"^(\s*)\"?{re.escape(key)}\"?\s*=", line)
            if km:
                return i, len(km.group(1)) + 1
    return 1, 1


# -- validation ----------------------------------------------------------------


def _in_range(v: float, k: Key) -> bool:
    if not math.isfinite(v):
        return False
    if k.lo is not None and (v <= k.lo if k.lo_open else v < k.lo):
        return False
    if k.hi is not None and (v >= k.hi if k.hi_open else v > k.hi):
        return False
    return True


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(name: str, v, k: Key) -> tuple[Any, str | None]:
    kind = k.kind
    if kind == "int":
        if not isinstance(v, int) or isinstance(v, bool):
            return v, f"{name} must be an integer"
        return v, None if _in_range(v, k) else f"{name}={v} out of range"
    if kind == "float":
        if not _is_num(v):
            return v, f"{name} must be a number"
        return float(v), None if _in_range(v, k) else f"{name}={v} out of range"
    if kind == "bool":
        return v, None if isinstance(v, bool) else f"{name} must be true or false"
    if kind == "str":
        if not isinstance(v, str):
            return v, f"{name} must be a string"
        if k.choices and v not in k.choices:
            return v, f"{name}={v!r} is not one of {', '.join(k.choices)}"
        return v, None
    if kind in ("floats", "ints", "strs"):
        if not isinstance(v, list) or not v:
            return v, f"{name} must be a non-empty array"
        elem = {"floats": "float", "ints": "int", "strs": "str"}[kind]
        sub = Key(elem, None, k.lo, k.hi, k.lo_open, k.hi_open, k.choices)
        out = []
        for i, x in enumerate(v):
            x, err = _check(f"{name}[{i}]", x, sub)
            if err:
                return v, err
            out.append(x)
        return out, None
    if kind == "points":
        ok = (isinstance(v, list) and len(v) >= 2 and all(
            isinstance(p, list) and len(p) == 2 and all(_is_num(c) and math.isfinite(c) for c in p)
            for p in v))
        return ([[float(c) for c in p] for p in v] if ok else v,
                None if ok else f"{name} must be an array of at least two [x, y] pairs")
    raise AssertionError(kind)


@dataclass
class Config:
    env: dict
    policy: dict
    learner: dict
    experiment: dict
    grid: dict = field(default_factory=dict)
    digest: str = ""

    def swimmer_params(self) -> SwimmerParams:
        e = self.env
        return SwimmerParams(n_links=e["n_links"], link_length=e["link_length"], mass=e["mass"],
                             k_normal=e["k_normal"], k_tangent=e["k_tangent"], dt=e["dt"],
                             gain=e["gain"], q_max=math.radians(e["q_max_deg"]),
                             k_limit=e["k_limit"], d_limit=e["d_limit"],
                             substeps=e["substeps"],
                             rate_scale=e["rate_scale"], joint_damping=e["joint_damping"])

    def task_spec(self) -> TaskSpec:
        e = self.env
        kind = e["task"]
        length = e["episode_length"] or {"pretrain-target": 300, "sparse-seek": 800,
                                         "canyon": 3000, "multi-track": 300}[kind]
        d_min = e["min_distance"]
        if d_min is None:
            d_min = 6.0 if e["hard"] else 2.0
        return TaskSpec(
            kind=kind, episode_length=length, target_distance=tuple(e["target_distance"]),
            target_radius=e["target_radius"], min_distance=d_min,
            distance_span=e["distance_span"],
            view_half_angle=math.radians(e["view_half_angle_deg"]), subtask=e["subtask"],
            circle_radius=e["circle_radius"], speed_clip=e["speed_clip"],
            track_weight=e["track_weight"],
            canyon_centerline=tuple(tuple(p) for p in e["canyon_centerline"]),
            canyon_width=e["canyon_width"], n_rays=e["n_rays"],
            fan_angle=math.radians(e["fan_angle_deg"]), ray_range=e["ray_range"])

    def learner_config(self, **overrides) -> LearnerConfig:
        d = dict(self.learner)
        d["sigma_init"] = self.policy["sigma_init"]
        d.update(overrides)
        return LearnerConfig.from_dict(d)


def parse_config(text: str, source: str = "<config>") -> Config:
    """Parse and validate TOML ``text``; raises :class:`ConfigError`."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+), column (\d+)", str(exc))
        line, col = (int(m.group(1)), int(m.group(2))) if m else (None, None)
        msg = re.sub(r"\s*\(at line \d+, column \d+\)", "", str(exc))
        raise ConfigError(f"syntax error: {msg}", line, col, source) from None

    def fail(msg, section, key=None):
        raise ConfigError(msg, *_locate(text, section, key), source)

    out: dict[str, dict] = {}
    for sec in raw:
        if sec not in ("env", "policy", "learner", "experiment"):
            fail(f"unknown section [{sec}]", sec)
        if not isinstance(raw[sec], dict):
            fail(f"{sec} must be a table", None, sec)
    for sec in ("env", "policy", "learner", "experiment", "experiment.grid"):
        if sec == "experiment.grid":
            given = raw.get("experiment", {}).get("grid", {})
            if not isinstance(given, dict):
                fail("experiment.grid must be a table", "experiment", "grid")
        else:
            given = dict(raw.get(sec, {}))
            if sec == "experiment":
                given.pop("grid", None)
        vals = {}
        for key, v in given.items():
            if key not in SCHEMA[sec]:
                fail(f"unknown key {key!r} in [{sec}]", sec, key)
            v, err = _check(key, v, SCHEMA[sec][key])
            if err:
                fail(err, sec, key)
            vals[key] = v
        for key, k in SCHEMA[sec].items():
            if key not in vals:
                if k.required:
                    fail(f"missing required key {key!r} in [{sec}]", sec)
                if sec != "experiment.grid":
                    vals[key] = k.default
        out[sec] = vals

    env, pol, exp, grid = out["env"], out["policy"], out["experiment"], out["experiment.grid"]
    lo, hi = env["target_distance"] if len(env["target_distance"]) == 2 else (None, None)
    if lo is None or lo > hi:
        fail("target_distance must be [low, high] with low <= high", "env", "target_distance")
    if not pol["sigma_min"] < pol["sigma_init"] < pol["sigma_max"]:
        fail("sigma_init must lie strictly between sigma_min and sigma_max", "policy", "sigma_init")
    if not pol["sigma_min"] < pol["hl_sigma_init"] < pol["sigma_max"]:
        fail("hl_sigma_init must lie strictly between sigma_min and sigma_max", "policy",
             "hl_sigma_init")
    if exp["phase"] == "grid" and not grid:
        fail("grid phase needs a non-empty [experiment.grid] table", "experiment", "phase")
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return Config(env, pol, out["learner"], exp, grid, digest)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", source=str(path)) from None
    except UnicodeDecodeError:
        raise ConfigError("config is not valid UTF-8", source=str(path)) from None
    return parse_config(text, str(path))
