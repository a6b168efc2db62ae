"""Reverse-mode automatic differentiation over dense float64 arrays.

Values are computed eagerly when an op is recorded; :meth:`Tape.backward`
walks the recorded nodes once in reverse to accumulate gradients.  A tape
created with ``record=False`` evaluates the same ops without keeping any
nodes, which is what rollouts use.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class Tensor:
    """A dense array of float64 values, optionally a trainable leaf."""

    __slots__ = ("value", "requires_grad", "name", "_needs_grad", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        value = np.array(values, dtype=np.float64)
        if not np.isfinite(value).all():
            raise ValueError(f"tensor {name or ''} constructed with non-finite values")
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self._needs_grad = requires_grad

    @classmethod
    def _wrap(cls, value: np.ndarray, needs_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.value = value
        t.requires_grad = False
        t.name = None
        t._needs_grad = needs_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def _not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "kind", "operands", "ctx")

    def __init__(self, out, kind, operands, ctx):
        self.out = out
        self.kind = kind
        self.operands = operands
        self.ctx = ctx


# -- forward rules -----------------------------------------------------------
# Each forward returns (value, ctx); each vjp maps (grad_out, operands, out, ctx)
# to a tuple of operand gradients (None where no gradient is needed).


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{kind}: operand shapes {a.shape} and {b.shape} differ")


def _fw_matmul(ops, attrs):
    a, b = ops
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return a.value @ b.value, None


def _vjp_matmul(g, ops, out, ctx):
    a, b = ops
    return (g @ b.value.T if a._needs_grad else None,
            a.value.T @ g if b._needs_grad else None)


def _fw_add(ops, attrs):
    _same_shape("add", *ops)
    return ops[0].value + ops[1].value, None


def _vjp_add(g, ops, out, ctx):
    return g, g


def _fw_sub(ops, attrs):
    _same_shape("sub", *ops)
    return ops[0].value - ops[1].value, None


def _vjp_sub(g, ops, out, ctx):
    return g, -g


def _fw_mul(ops, attrs):
    _same_shape("mul", *ops)
    return ops[0].value * ops[1].value, None


def _vjp_mul(g, ops, out, ctx):
    a, b = ops
    return (g * b.value if a._needs_grad else None,
            g * a.value if b._needs_grad else None)


def _fw_bias_add(ops, attrs):
    x, b = ops
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ValueError(f"bias_add: shapes {x.shape} and {b.shape} are incompatible")
    return x.value + b.value, None


def _vjp_bias_add(g, ops, out, ctx):
    return g, g.sum(axis=0)


def _fw_scale(ops, attrs):
    return ops[0].value * attrs["c"], attrs["c"]


def _vjp_scale(g, ops, out, c):
    return (g * c,)


def _fw_tanh(ops, attrs):
    return np.tanh(ops[0].value), None


def _vjp_tanh(g, ops, out, ctx):
    return (g * (1.0 - out.value * out.value),)


def _fw_sigmoid(ops, attrs):
    x = ops[0].value
    # tanh form is overflow-free for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0), None


def _vjp_sigmoid(g, ops, out, ctx):
    s = out.value
    return (g * s * (1.0 - s),)


def _fw_exp(ops, attrs):
    return np.exp(ops[0].value), None


def _vjp_exp(g, ops, out, ctx):
    return (g * out.value,)


def _fw_log(ops, attrs):
    x = ops[0].value
    if (x <= 0).any():
        raise ValueError("log: non-positive input")
    return np.log(x), None


def _vjp_log(g, ops, out, ctx):
    return (g / ops[0].value,)


def _fw_square(ops, attrs):
    return ops[0].value * ops[0].value, None


def _vjp_square(g, ops, out, ctx):
    return (2.0 * g * ops[0].value,)


def _fw_concat(ops, attrs):
    axis = attrs["axis"]
    ref = ops[0].shape
    for o in ops[1:]:
        if len(o.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(o.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: shapes {ref} and {o.shape} differ off axis {axis}")
    sizes = [o.shape[axis] for o in ops]
    return np.concatenate([o.value for o in ops], axis=axis), (axis, np.cumsum(sizes)[:-1])


def _vjp_concat(g, ops, out, ctx):
    axis, splits = ctx
    return tuple(np.split(g, splits, axis=axis))


def _fw_slice(ops, attrs):
    x = ops[0]
    axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ValueError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    return x.value[index], index


def _vjp_slice(g, ops, out, index):
    full = np.zeros_like(ops[0].value)
    full[index] = g
    return (full,)


def _fw_sum(ops, attrs):
    axis = attrs.get("axis")
    return np.asarray(ops[0].value.sum(axis=axis), dtype=np.float64), axis


def _vjp_sum(g, ops, out, axis):
    shape = ops[0].shape
    if axis is None:
        return (np.full(shape, float(g)),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


def _fw_mean(ops, attrs):
    return np.asarray(ops[0].value.mean(), dtype=np.float64), None


def _vjp_mean(g, ops, out, ctx):
    x = ops[0]
    return (np.full(x.shape, float(g) / x.size),)


def _fw_gaussian_logp(ops, attrs):
    a, mu, sigma = ops
    _same_shape("gaussian_logp", a, mu)
    _same_shape("gaussian_logp", a, sigma)
    s = sigma.value
    if (s <= 0).any():
        raise ValueError("gaussian_logp: sigma must be strictly positive")
    z = (a.value - mu.value) / s
    terms = -0.5 * LOG_2PI - np.log(s) - 0.5 * z * z
    axis = attrs.get("axis")
    return np.asarray(terms.sum(axis=axis), dtype=np.float64), (z, axis)


def _vjp_gaussian_logp(g, ops, out, ctx):
    a, mu, sigma = ops
    z, axis = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    s = sigma.value
    dmu = g * z / s
    ga = -dmu if a._needs_grad else None
    gs = g * (z * z - 1.0) / s if sigma._needs_grad else None
    return ga, dmu if mu._needs_grad else None, gs


_FORWARD: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fw_matmul, _vjp_matmul),
    "add": (_fw_add, _vjp_add),
    "sub": (_fw_sub, _vjp_sub),
    "mul": (_fw_mul, _vjp_mul),
    "bias_add": (_fw_bias_add, _vjp_bias_add),
    "scale": (_fw_scale, _vjp_scale),
    "tanh": (_fw_tanh, _vjp_tanh),
    "sigmoid": (_fw_sigmoid, _vjp_sigmoid),
    "exp": (_fw_exp, _vjp_exp),
    "log": (_fw_log, _vjp_log),
    "square": (_fw_square, _vjp_square),
    "concat": (_fw_concat, _vjp_concat),
    "slice": (_fw_slice, _vjp_slice),
    "sum": (_fw_sum, _vjp_sum),
    "mean": (_fw_mean, _vjp_mean),
    "gaussian_logp": (_fw_gaussian_logp, _vjp_gaussian_logp),
}

OP_KINDS = tuple(_FORWARD)


class Tape:
    """Records primitive ops in execution order for a single backward pass.

    Not thread-safe; use one tape per worker.
    """

    def __init__(self, record: bool = True):
        self.recording = record
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, *operands, **attrs) -> Tensor:
        try:
            forward, _ = _FORWARD[kind]
        except KeyError:
            raise ValueError(f"unknown op kind {kind!r}") from None
        ops = tuple(as_tensor(o) for o in operands)
        value, ctx = forward(ops, attrs)
        if not np.isfinite(value).all():
            raise FloatingPointError(f"{kind}: produced non-finite values")
        needs = self.recording and any(o._needs_grad for o in ops)
        out = Tensor._wrap(value, needs)
        if needs:
            self.nodes.append(_Node(out, kind, ops, ctx))
        return out

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of the scalar ``root`` for every trainable leaf reached."""
        if root.value.size != 1 or root.value.ndim > 1:
            raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            _, vjp = _FORWARD[node.kind]
            for op, og in zip(node.operands, vjp(g, node.operands, node.out, node.ctx)):
                if og is None or not op._needs_grad:
                    continue
                if op.requires_grad:
                    leaves[id(op)] = op
                key = id(op)
                prev = grads.get(key)
                grads[key] = og if prev is None else prev + og
        if root.requires_grad:
            leaves[id(root)] = root
        return {leaf: grads[id(leaf)].reshape(leaf.shape) for leaf in leaves.values()}

    # convenience wrappers
    def matmul(self, a, b):
        return self.record("matmul", a, b)

    def add(self, a, b):
        return self.record("add", a, b)

    def sub(self, a, b):
        return self.record("sub", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def bias_add(self, x, b):
        return self.record("bias_add", x, b)

    def scale(self, x, c: float):
        return self.record("scale", x, c=float(c))

    def tanh(self, x):
        return self.record("tanh", x)

    def sigmoid(self, x):
        return self.record("sigmoid", x)

    def exp(self, x):
        return self.record("exp", x)

    def log(self, x):
        return self.record("log", x)

    def square(self, x):
        return self.record("square", x)

    def concat(self, xs: Sequence, axis: int = 0):
        if not xs:
            raise ValueError("concat: no operands")
        return self.record("concat", *xs, axis=axis)

    def slice(self, x, start: int, stop: int, axis: int = -1):
        x = as_tensor(x)
        return self.record("slice", x, axis=axis % x.value.ndim, start=start, stop=stop)

    def sum(self, x, axis: int | None = None):
        return self.record("sum", x, axis=axis)

    def mean(self, x):
        return self.record("mean", x)

    def gaussian_logp(self, a, mu, sigma, axis: int | None = None):
        return self.record("gaussian_logp", a, mu, sigma, axis=axis)


def backward(tape: Tape, root: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(root)


def gaussian_logp(a, mu, sigma) -> float:
    """Log-density of a factorized Normal, summed over all entries."""
    return Tape(record=False).gaussian_logp(a, mu, sigma).item()


def finite_difference_grad(
    f: Callable[[], float], params: Iterable[Tensor], h: float = 1e-5
) -> dict[Tensor, np.ndarray]:
    """Central differences of ``f`` with respect to each parameter entry.

    ``f`` must re-read the parameters' ``value`` arrays on every call.
    """
    out = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat, gflat = p.value.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        out[p] = g
    return out


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest |a-n| / max(|a|, |n|) over entries, ignoring ones where both are tiny."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    big = scale > floor
    rel = np.where(big, diff / np.where(big, scale, 1.0), 0.0)
    # entries near zero are judged on absolute error
    small_bad = (~big) & (diff > floor)
    return float(max(rel.max(initial=0.0), np.inf if small_bad.any() else 0.0))
