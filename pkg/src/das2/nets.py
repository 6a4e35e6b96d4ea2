"""Surrogate networks: a plain tanh MLP on ``(x, xi)`` and a branch-trunk composite.

Both carry an optional hard-constraint ansatz that pins the value at ``x = 0``:

* ``ic_shift``: ``u = u0 + x * raw``
* ``ic_zero``:  ``u = x * raw``

Input points are arrays of shape ``(n, 1 + d)`` with the spatial coordinate in
column 0 and the parameters after it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, ShapeError

ANSATZ_KINDS = ("none", "ic_shift", "ic_zero")


@dataclass
class Ansatz:
    kind: str = "none"
    u0: float = 0.0

    def __post_init__(self):
        if self.kind not in ANSATZ_KINDS:
            raise ValueError(f"unknown ansatz {self.kind!r}; expected one of {ANSATZ_KINDS}")

    def to_json(self) -> dict:
        if self.kind == "ic_shift":
            return {"type": "ic_shift", "u0": self.u0}
        return {"type": self.kind}

    @classmethod
    def from_json(cls, obj) -> "Ansatz":
        if isinstance(obj, str):
            return cls(obj)
        return cls(obj["type"], float(obj.get("u0", 0.0)))


@dataclass
class Surrogate:
    """Parameters and structure of an approximate parametric solution.

    ``layer_sizes`` holds one width list per sub-network: ``[mlp]`` or
    ``[trunk, branch]``. Weights are stored ``(fan_in, fan_out)`` and applied
    as ``h @ W + b``.
    """

    kind: str
    layer_sizes: list[list[int]]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    b0: float | None = None
    ansatz: Ansatz = field(default_factory=Ansatz)
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in ("mlp", "branch_trunk"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        expected = 1 if self.kind == "mlp" else 2
        if len(self.layer_sizes) != expected:
            raise ValueError(f"{self.kind} needs {expected} layer-size lists")
        shapes = [(a, b) for sizes in self.layer_sizes for a, b in zip(sizes[:-1], sizes[1:])]
        if len(shapes) != len(self.weights) or len(shapes) != len(self.biases):
            raise ShapeError("layer count", len(shapes), len(self.weights))
        for (a, b), w, bias in zip(shapes, self.weights, self.biases):
            if w.shape != (a, b) or bias.shape != (b,):
                raise ShapeError("layer shape", (a, b), (w.shape, bias.shape))
        if self.kind == "branch_trunk":
            trunk, branch = self.layer_sizes
            if trunk[0] != 1:
                raise ShapeError("trunk input width", 1, trunk[0])
            if trunk[-1] != branch[-1]:
                raise ShapeError("trunk/branch output width", trunk[-1], branch[-1])
            if self.b0 is None:
                self.b0 = 0.0

    # -- structure -------------------------------------------------------------

    @property
    def input_dim(self) -> int:
        if self.kind == "mlp":
            return self.layer_sizes[0][0]
        return 1 + self.layer_sizes[1][0]

    @property
    def n_trunk_layers(self) -> int:
        return len(self.layer_sizes[0]) - 1

    def params(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in canonical order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.kind == "branch_trunk":
            out.append(np.array([self.b0]))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def with_params(self, params: list[np.ndarray]) -> "Surrogate":
        n = len(self.weights)
        ws = [np.array(params[2 * i], dtype=np.float64) for i in range(n)]
        bs = [np.array(params[2 * i + 1], dtype=np.float64) for i in range(n)]
        b0 = float(params[2 * n][0]) if self.kind == "branch_trunk" else None
        return Surrogate(self.kind, [list(s) for s in self.layer_sizes], ws, bs, b0,
                         Ansatz(self.ansatz.kind, self.ansatz.u0), self.activation)

    # -- evaluation ------------------------------------------------------------

    def bind(self, tape: ad.Tape, trainable: bool = True) -> list:
        make = tape.param if trainable else tape.constant
        return [make(p) for p in self.params()]

    def forward(self, params, points, coord: int | None = None) -> Dual:
        """Evaluate at ``points``; seed the tangent on input column ``coord``.

        ``params`` may be taped nodes from :meth:`bind` or the raw arrays from
        :meth:`params` (value-only evaluation).
        """
        points = np.asarray(points, dtype=np.float64)
        if self.kind == "mlp":
            raw = _mlp(params, 0, len(self.weights), _seeded(points, coord))
        else:
            nt = self.n_trunk_layers
            trunk_coord = 0 if coord == 0 else None
            branch_coord = None if coord in (None, 0) else coord - 1
            q = _mlp(params, 0, nt, _seeded(points[:, :1], trunk_coord))
            t = _mlp(params, nt, len(self.weights), _seeded(points[:, 1:], branch_coord))
            raw = (q * t).sum(axis=1) + params[-1]
        return self._ansatz(raw, Dual(points[:, :1], _seed_tangent(points, coord, 0)))

    def forward_grid(self, params, x_grid, xi, coord: int | None = 0) -> Dual:
        """Evaluate a branch-trunk net on the product set ``x_grid x xi``.

        Result shape is ``(m_x, m_xi)``; the trunk is evaluated once per grid
        point and the branch once per parameter sample. Only the spatial
        coordinate can be seeded.
        """
        if self.kind != "branch_trunk":
            raise ValueError("grid evaluation needs a branch_trunk surrogate")
        if coord not in (None, 0):
            raise ValueError("grid evaluation only seeds the spatial coordinate")
        x = np.asarray(x_grid, dtype=np.float64).reshape(-1, 1)
        xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
        nt = self.n_trunk_layers
        q = _mlp(params, 0, nt, _seeded(x, coord))
        t = _mlp(params, nt, len(self.weights), Dual(xi))
        raw = q @ t.T + params[-1]
        return self._ansatz(raw, Dual(x, None if coord is None else np.ones((1, 1))))

    def _ansatz(self, raw: Dual, x: Dual) -> Dual:
        kind = self.ansatz.kind
        if kind == "none":
            return raw
        shaped = x * raw
        if kind == "ic_zero":
            return shaped
        return shaped + self.ansatz.u0

    def __call__(self, points) -> np.ndarray:
        """Plain value evaluation, shape ``(n,)``."""
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[None, :]
        if points.shape[1] != self.input_dim:
            raise ShapeError("point dimension", self.input_dim, points.shape[1])
        if not np.all(np.isfinite(points)):
            raise ValueError("non-finite input point")
        return np.asarray(self.forward(self.params(), points).primal).reshape(-1)

    # -- serialization ---------------------------------------------------------

    def to_json(self) -> dict:
        obj = {
            "version": 1,
            "kind": self.kind,
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "ansatz": self.ansatz.to_json(),
        }
        if self.kind == "branch_trunk":
            obj["b0"] = self.b0
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "Surrogate":
        if obj.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
        if obj.get("kind") not in ("mlp", "branch_trunk"):
            raise ValueError(f"not a surrogate checkpoint (kind={obj.get('kind')!r})")
        if obj.get("activation", "tanh") != "tanh":
            raise ValueError("only tanh activation is supported")
        return cls(
            obj["kind"],
            [list(map(int, s)) for s in obj["layer_sizes"]],
            [np.array(w, dtype=np.float64).reshape(a, b) for w, (a, b) in
             zip(obj["weights"], _pairs(obj["layer_sizes"]))],
            [np.array(b, dtype=np.float64) for b in obj["biases"]],
            obj.get("b0"),
            Ansatz.from_json(obj.get("ansatz", "none")),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Surrogate":
        return cls.from_json(json.loads(Path(path).read_text()))


def _pairs(layer_sizes):
    return [(a, b) for sizes in layer_sizes for a, b in zip(sizes[:-1], sizes[1:])]


def _seed_tangent(points, coord, column):
    if coord is None or coord != column:
        return None
    return np.ones((1, 1))


def _seeded(points: np.ndarray, coord: int | None) -> Dual:
    if coord is None:
        return Dual(points)
    e = np.zeros((1, points.shape[1]))
    e[0, coord] = 1.0
    return Dual(points, e)


def _mlp(params, first: int, last: int, h: Dual) -> Dual:
    """Layers ``first..last-1`` of the flat parameter list, tanh between them."""
    for i in range(first, last):
        h = h @ Dual(params[2 * i]) + params[2 * i + 1]
        if i < last - 1:
            h = h.tanh()
    return h


def _xavier(rng: np.random.Generator, a: int, b: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (a + b))
    return rng.uniform(-lim, lim, size=(a, b))


def mlp_init(layer_sizes, seed: int, ansatz: Ansatz | None = None) -> Surrogate:
    """Xavier-uniform weights, zero biases; reproducible per ``seed``."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError("an mlp needs at least an input and an output layer")
    if min(sizes) < 1:
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    ws = [_xavier(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    return Surrogate("mlp", [sizes], ws, bs, None, ansatz or Ansatz())


def branch_trunk_init(trunk_sizes, branch_sizes, seed: int,
                      ansatz: Ansatz | None = None) -> Surrogate:
    trunk = [int(s) for s in trunk_sizes]
    branch = [int(s) for s in branch_sizes]
    if len(trunk) < 2 or len(branch) < 2:
        raise ValueError("trunk and branch need at least two layers each")
    if trunk[-1] != branch[-1]:
        raise ShapeError("trunk/branch output width", trunk[-1], branch[-1])
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for sizes in (trunk, branch):
        ws += [_xavier(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        bs += [np.zeros(b) for b in sizes[1:]]
    return Surrogate("branch_trunk", [trunk, branch], ws, bs, 0.0, ansatz or Ansatz())


def mlp_eval(s: Surrogate, points) -> np.ndarray:
    if s.kind != "mlp":
        raise ValueError("mlp_eval needs an mlp surrogate")
    return s(points)


def branch_trunk_eval(s: Surrogate, x, xi) -> np.ndarray:
    """``sum_i q_i(x) t_i(xi) + b0`` before any ansatz, pointwise."""
    if s.kind != "branch_trunk":
        raise ValueError("branch_trunk_eval needs a branch_trunk surrogate")
    x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    p = s.params()
    nt = s.n_trunk_layers
    q = _mlp(p, 0, nt, Dual(x)).primal
    t = _mlp(p, nt, len(s.weights), Dual(xi)).primal
    return (q * t).sum(axis=1) + s.b0


def apply_ansatz(s: Surrogate, raw, x):
    kind = s.ansatz.kind
    if kind == "none":
        raise ValueError("surrogate has no ansatz")
    if kind == "ic_zero":
        return x * raw
    return s.ansatz.u0 + x * raw
