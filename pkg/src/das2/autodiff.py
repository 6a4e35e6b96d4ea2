"""Tape-based reverse-mode differentiation over numpy arrays.

Every node on a :class:`Tape` stores an array value. Parameter gradients come
from a reverse sweep over the tape. Input derivatives (``du/dx``) come from
forward-mode :class:`Dual` numbers whose tangent arithmetic is itself recorded
on the tape, so a loss that contains ``du/dx`` can still be differentiated with
respect to the parameters.

The module-level ops (:func:`tanh`, :func:`exp`, ...) dispatch on their
arguments: with plain arrays they run numpy directly and record nothing, which
lets model code serve both the training path and fast value-only queries.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# op name -> (forward(values, attr), backward(grad_out, values, out, attr))
_OPS: dict[str, tuple[Callable, Callable]] = {}


class ShapeError(ValueError):
    """Raised when array shapes disagree with what an operation expects."""

    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _register(name, forward, backward):
    _OPS[name] = (forward, backward)


_register("add", lambda v, a: v[0] + v[1], lambda g, v, o, a: (g, g))
_register("sub", lambda v, a: v[0] - v[1], lambda g, v, o, a: (g, -g))
_register("mul", lambda v, a: v[0] * v[1], lambda g, v, o, a: (g * v[1], g * v[0]))
_register(
    "div",
    lambda v, a: v[0] / v[1],
    lambda g, v, o, a: (g / v[1], -g * v[0] / (v[1] * v[1])),
)
_register("tanh", lambda v, a: np.tanh(v[0]), lambda g, v, o, a: (g * (1.0 - o * o),))
_register("exp", lambda v, a: np.exp(v[0]), lambda g, v, o, a: (g * o,))
_register("log", lambda v, a: np.log(v[0]), lambda g, v, o, a: (g / v[0],))
_register("square", lambda v, a: v[0] * v[0], lambda g, v, o, a: (2.0 * g * v[0],))
_register(
    "dot",
    lambda v, a: v[0] @ v[1],
    lambda g, v, o, a: (g @ np.swapaxes(v[1], -1, -2), np.swapaxes(v[0], -1, -2) @ g),
)
_register("transpose", lambda v, a: v[0].T, lambda g, v, o, a: (g.T,))


def _sum_forward(v, axis):
    if axis is None:
        return np.asarray(v[0].sum())
    return v[0].sum(axis=axis, keepdims=True)


def _sum_backward(g, v, o, axis):
    return (np.broadcast_to(g, v[0].shape),)


_register("sum", _sum_forward, _sum_backward)


class Tape:
    """Append-only record of elementary operations.

    Nodes are stored in creation order, so every node's parents precede it.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.attrs: list = []
        self.tracked: list[bool] = []
        self.param_ids: list[int] = []

    def __len__(self):
        return len(self.values)

    def _push(self, op, value, parents=(), attr=None, tracked=False) -> "Var":
        self.ops.append(op)
        self.values.append(value)
        self.parents.append(tuple(parents))
        self.attrs.append(attr)
        self.tracked.append(tracked)
        return Var(self, len(self.values) - 1)

    def constant(self, value) -> "Var":
        return self._push("const", np.asarray(value, dtype=np.float64))

    def param(self, value) -> "Var":
        """Register a trainable leaf. Gradients are reported in registration order."""
        var = self._push("param", np.asarray(value, dtype=np.float64), tracked=True)
        self.param_ids.append(var.index)
        return var

    def apply(self, op: str, *args) -> "Var":
        attr = None
        if op == "sum":
            attr, args = args[-1], args[:-1]
        nodes = [self._lift(a) for a in args]
        value = _OPS[op][0]([n.value for n in nodes], attr)
        tracked = any(self.tracked[n.index] for n in nodes)
        return self._push(op, value, [n.index for n in nodes], attr, tracked)

    def _lift(self, x) -> "Var":
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("cannot mix nodes from different tapes")
            return x
        return self.constant(x)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves, in tape order."""
        out: list[np.ndarray] = []
        for op, parents, attr, value in zip(self.ops, self.parents, self.attrs, self.values):
            if op in ("const", "param"):
                out.append(value)
            else:
                out.append(_OPS[op][0]([out[p] for p in parents], attr))
        return out

    def gradient(self, loss: "Var") -> list[np.ndarray]:
        """Reverse sweep from a scalar node; one gradient array per parameter leaf."""
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError("loss node must be scalar", (), loss.value.shape)
        adj: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        for i in range(loss.index, -1, -1):
            g = adj.get(i)
            if g is None or not self.tracked[i]:
                continue
            op = self.ops[i]
            if op in ("const", "param"):
                continue
            parents = self.parents[i]
            vals = [self.values[p] for p in parents]
            grads = _OPS[op][1](g, vals, self.values[i], self.attrs[i])
            for p, gp in zip(parents, grads):
                if not self.tracked[p]:
                    continue
                gp = _unbroadcast(np.asarray(gp), self.values[p].shape)
                if p in adj:
                    adj[p] = adj[p] + gp
                else:
                    adj[p] = gp
        return [
            adj[p] if p in adj else np.zeros_like(self.values[p]) for p in self.param_ids
        ]


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "index")
    # let numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Var":
        return self.tape.apply("transpose", self)

    def __add__(self, o):
        return self.tape.apply("add", self, o)

    def __radd__(self, o):
        return self.tape.apply("add", o, self)

    def __sub__(self, o):
        return self.tape.apply("sub", self, o)

    def __rsub__(self, o):
        return self.tape.apply("sub", o, self)

    def __mul__(self, o):
        return self.tape.apply("mul", self, o)

    def __rmul__(self, o):
        return self.tape.apply("mul", o, self)

    def __truediv__(self, o):
        return self.tape.apply("div", self, o)

    def __rtruediv__(self, o):
        return self.tape.apply("div", o, self)

    def __neg__(self):
        return self.tape.apply("mul", self, -1.0)

    def __matmul__(self, o):
        return self.tape.apply("dot", self, o)

    def __rmatmul__(self, o):
        return self.tape.apply("dot", o, self)

    def __repr__(self):
        return f"Var(#{self.index}, {self.tape.ops[self.index]}, shape={self.shape})"


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def tanh(x):
    t = _tape_of(x)
    return np.tanh(x) if t is None else t.apply("tanh", x)


def exp(x):
    t = _tape_of(x)
    return np.exp(x) if t is None else t.apply("exp", x)


def log(x):
    t = _tape_of(x)
    return np.log(x) if t is None else t.apply("log", x)


def square(x):
    t = _tape_of(x)
    return np.square(x) if t is None else t.apply("square", x)


def dot(a, b):
    t = _tape_of(a, b)
    return a @ b if t is None else t.apply("dot", a, b)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    """Sum over ``axis`` (kept as a length-1 dimension) or over everything."""
    t = _tape_of(x)
    if t is None:
        x = np.asarray(x)
        return x.sum() if axis is None else x.sum(axis=axis, keepdims=True)
    return t.apply("sum", x, axis)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


@dataclass
class Dual:
    """A primal quantity and its derivative along one input coordinate.

    ``tangent is None`` stands for an identically zero tangent, which keeps
    constants (and whole sub-networks that never see the seeded input) free.
    """

    primal: object
    tangent: object = None

    def __add__(self, o):
        o = _as_dual(o)
        return Dual(self.primal + o.primal, _tadd(self.tangent, o.tangent))

    __radd__ = __add__

    def __sub__(self, o):
        o = _as_dual(o)
        nt = None if o.tangent is None else -1.0 * o.tangent
        return Dual(self.primal - o.primal, _tadd(self.tangent, nt))

    def __rsub__(self, o):
        return _as_dual(o) - self

    def __mul__(self, o):
        o = _as_dual(o)
        t1 = None if self.tangent is None else self.tangent * o.primal
        t2 = None if o.tangent is None else self.primal * o.tangent
        return Dual(self.primal * o.primal, _tadd(t1, t2))

    __rmul__ = __mul__

    def __matmul__(self, o):
        o = _as_dual(o)
        t1 = None if self.tangent is None else dot(self.tangent, o.primal)
        t2 = None if o.tangent is None else dot(self.primal, o.tangent)
        return Dual(dot(self.primal, o.primal), _tadd(t1, t2))

    def tanh(self) -> "Dual":
        p = tanh(self.primal)
        if self.tangent is None:
            return Dual(p)
        return Dual(p, (1.0 - square(p)) * self.tangent)

    @property
    def T(self) -> "Dual":
        tp = self.primal.T
        return Dual(tp, None if self.tangent is None else self.tangent.T)

    def sum(self, axis=None) -> "Dual":
        t = None if self.tangent is None else sum(self.tangent, axis)
        return Dual(sum(self.primal, axis), t)


def _as_dual(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(x)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# -- network-level entry points ------------------------------------------------


def forward_eval(net, points, tape: Tape | None = None):
    """Evaluate ``net`` at ``points`` on a tape; returns ``(u, tape)``.

    ``net`` must provide ``bind(tape)`` and ``forward(params, points, coord)``.
    """
    tape = Tape() if tape is None else tape
    pts = _check_points(net, points)
    params = net.bind(tape)
    u = net.forward(params, pts)
    return u.primal, tape


def grad_input(net, points, coord: int, tape: Tape | None = None):
    """Return ``(u, du/dx_coord)`` as taped nodes differentiable in the parameters."""
    tape = Tape() if tape is None else tape
    pts = _check_points(net, points)
    if not 0 <= coord < pts.shape[1]:
        raise IndexError(f"coord {coord} out of range for input dimension {pts.shape[1]}")
    params = net.bind(tape)
    u = net.forward(params, pts, coord=coord)
    du = u.tangent if u.tangent is not None else tape.constant(np.zeros(value_of(u.primal).shape))
    return u.primal, du, tape


def grad_params(tape: Tape, loss: Var) -> np.ndarray:
    """Flat gradient of a scalar loss node over every parameter leaf on the tape."""
    grads = tape.gradient(loss)
    if not grads:
        return np.zeros(0)
    return np.concatenate([g.ravel() for g in grads])


def _check_points(net, points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[1] != net.input_dim:
        raise ShapeError("point dimension", net.input_dim, pts.shape[1])
    return pts


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, k = [], 0
    for a in like:
        n = np.size(a)
        out.append(np.asarray(vec[k : k + n], dtype=np.float64).reshape(np.shape(a)))
        k += n
    if k != vec.size:
        raise ShapeError("flat parameter vector length", k, vec.size)
    return out


def check_gradient(
    f: Callable[[Tape, list[Var]], Var],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f(tape, param_vars)`` builds a scalar loss. The returned error is
    ``max|g_tape - g_fd| / max(|g_tape|_inf, |g_fd|_inf)``, defined as 0 when
    both gradients vanish.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    tape = Tape()
    loss = f(tape, [tape.param(p) for p in params])
    analytic = grad_params(tape, loss)

    theta = flatten(params)

    def value_at(vec):
        t = Tape()
        return float(f(t, [t.constant(p) for p in unflatten(vec, params)]).value)

    numeric = np.empty_like(theta)
    for i in range(theta.size):
        e = theta.copy()
        e[i] += step
        fp = value_at(e)
        e[i] = theta[i] - step
        fm = value_at(e)
        numeric[i] = (fp - fm) / (2.0 * step)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)
