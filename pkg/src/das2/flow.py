"""Triangular normalizing flow on a bounded box.

Layer order from data to latent space:

1. componentwise logit map from the open box ``B`` onto ``R^d``;
2. ``K`` outer blocks, each a fixed reversal of the still-active coordinates
   followed by ``L`` inner layers of (affine coupling, actnorm);
3. after every outer block but the last, the trailing ``ceil(d/K)`` active
   coordinates are frozen (kept at least one active), which gives the map the
   block-triangular Knothe-Rosenblatt structure.

Coupling scales are soft-clamped to ``clamp * tanh(s / clamp)`` and actnorm
scales are parameterized by their logarithm, so every layer is invertible with
a closed-form log-determinant. The latent prior is the standard normal.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import ShapeError
from .optim import AdamState, adam_step

LOG_2PI = math.log(2.0 * math.pi)
PARAMS_PER_LAYER = 10


class SamplingStarvation(RuntimeError):
    def __init__(self, accepted: int, drawn: int, wanted: int, stage: int | None = None):
        rate = accepted / drawn if drawn else 0.0
        where = "" if stage is None else f"stage {stage}: "
        super().__init__(
            f"{where}restricted sampling starved: {accepted}/{wanted} accepted after "
            f"{drawn} draws (acceptance rate {rate:.3g})"
        )
        self.accepted, self.drawn, self.wanted, self.stage = accepted, drawn, wanted, stage
        self.acceptance_rate = rate


@dataclass
class BoxDomain:
    """Box ``Omega = [lower, upper]`` and its enlargement ``B``.

    ``B`` widens each side by ``margin`` times the side length.
    """

    lower: np.ndarray
    upper: np.ndarray
    margin: float = 0.05

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape:
            raise ShapeError("box bounds", self.lower.shape, self.upper.shape)
        if not np.all(self.lower < self.upper):
            raise ValueError("box needs lower < upper in every dimension")
        if not self.margin > 0:
            raise ValueError("margin must be positive so that B strictly contains Omega")

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def outer_lower(self) -> np.ndarray:
        return self.lower - self.margin * self.width

    @property
    def outer_upper(self) -> np.ndarray:
        return self.upper + self.margin * self.width

    @property
    def volume(self) -> float:
        return float(np.prod(self.width))

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lower) & (p <= self.upper), axis=1)

    def strictly_in_outer(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p > self.outer_lower) & (p < self.outer_upper), axis=1)

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "margin": self.margin}

    @classmethod
    def from_json(cls, obj) -> "BoxDomain":
        return cls(np.array(obj["lower"]), np.array(obj["upper"]), float(obj["margin"]))


@dataclass
class FlowModel:
    dim: int
    K: int
    L: int
    hidden: int
    box: BoxDomain
    params: list[np.ndarray]
    clamp: float = 1.5
    frozen_schedule: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.box.dim != self.dim:
            raise ShapeError("box dimension", self.dim, self.box.dim)
        if len(self.params) != PARAMS_PER_LAYER * self.K * self.L:
            raise ShapeError("flow parameter count", PARAMS_PER_LAYER * self.K * self.L,
                             len(self.params))
        self._build_masks()

    def _build_masks(self):
        d = self.dim
        active = list(range(d))
        self.perms, self.tmasks, self.amasks, sched = [], [], [], []
        for k in range(self.K):
            perm = np.eye(d)
            rev = active[::-1]
            perm[:, active] = np.eye(d)[:, rev]
            self.perms.append(perm)
            amask = np.zeros(d)
            amask[active] = 1.0
            self.amasks.append(amask)
            masks = []
            for j in range(self.L):
                chosen = active if len(active) == 1 else active[j % 2 :: 2]
                tm = np.zeros(d)
                tm[chosen] = 1.0
                masks.append(tm)
            self.tmasks.append(masks)
            n_freeze = 0 if k == self.K - 1 else min(math.ceil(d / self.K), len(active) - 1)
            sched.append(n_freeze)
            active = active[: len(active) - n_freeze]
        if self.frozen_schedule and list(self.frozen_schedule) != sched:
            raise ValueError(f"frozen schedule {self.frozen_schedule} != derived {sched}")
        self.frozen_schedule = sched

    # -- transforms ------------------------------------------------------------

    def _layer(self, params, k, j):
        base = PARAMS_PER_LAYER * (k * self.L + j)
        return params[base : base + PARAMS_PER_LAYER]

    def _coupling(self, lp, y, tmask):
        w1, b1, w2, b2, ws, bs, wt, bt = lp[:8]
        h = ad.tanh(ad.dot(y * (1.0 - tmask), w1) + b1)
        h = ad.tanh(ad.dot(h, w2) + b2)
        s = self.clamp * ad.tanh((ad.dot(h, ws) + bs) * (1.0 / self.clamp)) * tmask
        t = (ad.dot(h, wt) + bt) * tmask
        return s, t

    def transform(self, params, points):
        """Map points in ``B`` to latent space; returns ``(z, logdet)``.

        ``params`` may be taped nodes (training) or arrays (evaluation).
        ``logdet`` has shape ``(n, 1)``.
        """
        y, ld = _box_forward(self.box, points)
        for k in range(self.K):
            y = ad.dot(y, self.perms[k])
            amask = self.amasks[k]
            for j in range(self.L):
                lp = self._layer(params, k, j)
                s, t = self._coupling(lp, y, self.tmasks[k][j])
                y = y * ad.exp(s) + t
                ld = ld + ad.sum(s, axis=1)
                la = lp[8] * amask
                y = y * ad.exp(la) + lp[9] * amask
                ld = ld + ad.sum(la)
        return y, ld

    def inverse(self, z) -> np.ndarray:
        y = np.array(z, dtype=np.float64, ndmin=2)
        if y.shape[1] != self.dim:
            raise ShapeError("latent dimension", self.dim, y.shape[1])
        for k in reversed(range(self.K)):
            amask = self.amasks[k]
            for j in reversed(range(self.L)):
                lp = self._layer(self.params, k, j)
                la = lp[8] * amask
                y = (y - lp[9] * amask) * np.exp(-la)
                s, t = self._coupling(lp, y, self.tmasks[k][j])
                y = (y - t) * np.exp(-s)
            y = y @ self.perms[k].T
        return _box_inverse(self.box, y)

    def forward(self, points):
        z, ld = self.transform(self.params, self._inside(points))
        return z, ld.reshape(-1)

    def logpdf(self, points) -> np.ndarray:
        z, ld = self.forward(points)
        return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * LOG_2PI + ld

    def log_prob_taped(self, param_vars, points):
        z, ld = self.transform(param_vars, self._inside(points))
        return ad.sum(ad.square(z), axis=1) * -0.5 + ld - 0.5 * self.dim * LOG_2PI

    def _inside(self, points) -> np.ndarray:
        p = np.array(points, dtype=np.float64, ndmin=2)
        if p.shape[1] != self.dim:
            raise ShapeError("point dimension", self.dim, p.shape[1])
        if not np.all(self.box.strictly_in_outer(p)):
            raise ValueError("flow density is supported on the open box B only")
        return p

    # -- bookkeeping -----------------------------------------------------------

    def with_params(self, params) -> "FlowModel":
        return FlowModel(self.dim, self.K, self.L, self.hidden, copy.deepcopy(self.box),
                         [np.array(p, dtype=np.float64) for p in params], self.clamp,
                         list(self.frozen_schedule))

    def copy(self) -> "FlowModel":
        return self.with_params(self.params)

    def to_json(self) -> dict:
        names = ("W1", "b1", "W2", "b2", "Ws", "bs", "Wt", "bt", "actnorm_log_scale",
                 "actnorm_bias")
        layers = []
        for k in range(self.K):
            for j in range(self.L):
                lp = self._layer(self.params, k, j)
                layers.append({n: p.tolist() for n, p in zip(names, lp)})
        return {
            "version": 1,
            "kind": "flow",
            "dim": self.dim,
            "K": self.K,
            "L": self.L,
            "hidden": self.hidden,
            "clamp": self.clamp,
            "box": self.box.to_json(),
            "frozen_schedule": self.frozen_schedule,
            "layers": layers,
        }

    @classmethod
    def from_json(cls, obj) -> "FlowModel":
        if obj.get("kind") != "flow":
            raise ValueError(f"not a flow checkpoint (kind={obj.get('kind')!r})")
        if obj.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
        d, h = int(obj["dim"]), int(obj["hidden"])
        shapes = [(d, h), (h,), (h, h), (h,), (h, d), (d,), (h, d), (d,), (d,), (d,)]
        params = []
        for layer in obj["layers"]:
            for v, shape in zip(layer.values(), shapes):
                params.append(np.array(v, dtype=np.float64).reshape(shape))
        return cls(d, int(obj["K"]), int(obj["L"]), h, BoxDomain.from_json(obj["box"]),
                   params, float(obj["clamp"]), list(obj["frozen_schedule"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "FlowModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _box_forward(box: BoxDomain, points):
    lo, hi = box.outer_lower, box.outer_upper
    s = (points - lo) / (hi - lo)
    log_s, log_1ms = np.log(s), np.log1p(-s)
    ld = -np.sum(np.log(hi - lo) + log_s + log_1ms, axis=1, keepdims=True)
    return log_s - log_1ms, ld


def _box_inverse(box: BoxDomain, y):
    lo, hi = box.outer_lower, box.outer_upper
    x = lo + (hi - lo) * expit(y)
    # keep results in the open box even when expit saturates
    return np.clip(x, np.nextafter(lo, hi), np.nextafter(hi, lo))


def flow_init(dim, K, L, hidden, box: BoxDomain, seed: int, clamp: float = 1.5) -> FlowModel:
    """Random hidden layers, zero output heads and actnorm: the identity on ``R^d``."""
    if dim < 1 or K < 1 or L < 1 or hidden < 1:
        raise ValueError("dim, K, L and hidden must all be >= 1")
    if box.dim != dim:
        raise ShapeError("box dimension", dim, box.dim)
    rng = np.random.default_rng(seed)
    params = []
    for _ in range(K * L):
        params += [
            _xavier(rng, dim, hidden), np.zeros(hidden),
            _xavier(rng, hidden, hidden), np.zeros(hidden),
            np.zeros((hidden, dim)), np.zeros(dim),
            np.zeros((hidden, dim)), np.zeros(dim),
            np.zeros(dim), np.zeros(dim),
        ]
    return FlowModel(dim, K, L, hidden, box, params, clamp)


def _xavier(rng, a, b):
    lim = math.sqrt(6.0 / (a + b))
    return rng.uniform(-lim, lim, size=(a, b))


def flow_forward(f: FlowModel, points):
    return f.forward(points)


def flow_inverse(f: FlowModel, z) -> np.ndarray:
    return f.inverse(z)


def flow_logpdf(f: FlowModel, points) -> np.ndarray:
    return f.logpdf(points)


def flow_sample(f: FlowModel, n: int, rng: np.random.Generator, restrict=None,
                max_attempts: int = 50, return_rate: bool = False):
    """Draw ``n`` points by pushing standard normals through the inverse map.

    With ``restrict`` (a :class:`BoxDomain`, or ``True`` for the flow's own
    Omega) points outside it are rejected and redrawn, up to
    ``max_attempts * n`` draws in total.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if restrict is None or restrict is False:
        pts = f.inverse(rng.standard_normal((n, f.dim)))
        return (pts, 1.0) if return_rate else pts
    region = f.box if restrict is True else restrict
    kept, accepted, drawn = [], 0, 0
    while accepted < n:
        if drawn >= max_attempts * n:
            raise SamplingStarvation(accepted, drawn, n)
        batch = min(max(n - accepted, 64) * 2, max_attempts * n - drawn)
        pts = f.inverse(rng.standard_normal((batch, f.dim)))
        drawn += batch
        pts = pts[region.contains(pts)]
        kept.append(pts)
        accepted += len(pts)
    out = np.concatenate(kept)[:n]
    return (out, accepted / drawn) if return_rate else out


# -- cross entropy ---------------------------------------------------------------


def importance_weights(proposal: FlowModel, target: Callable, points,
                       self_normalize: bool = True) -> np.ndarray:
    """``target / proposal`` at ``points``, optionally rescaled to mean one."""
    r = np.asarray(target(points), dtype=np.float64).reshape(-1)
    if np.any(r < 0):
        raise ValueError("target density must be nonnegative")
    logq = proposal.logpdf(points)
    if np.any(~np.isfinite(logq)):
        raise ValueError("proposal density vanishes at a batch point")
    if not self_normalize:
        return r * np.exp(-logq)
    with np.errstate(divide="ignore"):
        logw = np.log(r) - logq
    if not np.any(r > 0):
        return np.zeros_like(r)
    w = np.exp(logw - logw.max())
    return w * (len(w) / w.sum())


def weighted_nll(f: FlowModel, param_vars, points, weights):
    """Taped ``-(1/m) sum_i w_i log p(points_i)``."""
    logp = f.log_prob_taped(param_vars, points)
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return ad.sum(logp * w) * (-1.0 / len(w))


def ce_loss(f: FlowModel, proposal: FlowModel, target: Callable, points,
            self_normalize: bool = True):
    """Importance-sampled cross entropy of ``f`` against the unnormalized ``target``.

    Returns ``(loss_node, tape)``; only ``f``'s parameters are on the tape.
    """
    w = importance_weights(proposal, target, points, self_normalize)
    tape = ad.Tape()
    pv = [tape.param(p) for p in f.params]
    return weighted_nll(f, pv, points, w), tape


def train_flow(f: FlowModel, proposal: FlowModel, target: Callable, epochs: int, m: int,
               rng: np.random.Generator, lr: float = 1e-3, steps_per_epoch: int = 1,
               self_normalize: bool = True, state: AdamState | None = None,
               on_epoch: Callable[[int, float], None] | None = None):
    """Fit ``f`` to ``target`` with fresh proposal draws every step.

    The proposal is never updated. Returns ``(trained_flow, per_epoch_losses, adam_state)``.
    """
    state = state or AdamState()
    params = [p.copy() for p in f.params]
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for _ in range(steps_per_epoch):
            pts = flow_sample(proposal, m, rng)
            w = importance_weights(proposal, target, pts, self_normalize)
            tape = ad.Tape()
            pv = [tape.param(p) for p in params]
            loss = weighted_nll(f, pv, pts, w)
            grads = tape.gradient(loss)
            params, state = adam_step(params, grads, state, lr)
            total += float(loss.value)
        losses.append(total / steps_per_epoch)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    return f.with_params(params), losses, state
