"""Collocation-point generation and training-set bookkeeping."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .flow import BoxDomain

# named sub-streams so that each consumer of randomness is independent
STREAMS = {
    "surrogate_init": 0,
    "flow_init": 1,
    "initial_set": 2,
    "minibatch": 3,
    "flow_train": 4,
    "refine": 5,
    "validation": 6,
    "rar_pool": 7,
}


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self, *extra: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, self.stream, *extra]))

    @classmethod
    def named(cls, seed: int, name: str) -> "RngStream":
        return cls(seed, STREAMS[name])


@dataclass
class TrainingSet:
    """Ordered collocation points with the stage that produced each one."""

    points: np.ndarray
    stages: np.ndarray
    weights: np.ndarray | None = None
    n_spatial: int = 1

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        self.stages = np.asarray(self.stages, dtype=np.int64).reshape(-1)
        if len(self.stages) != len(self.points):
            raise ValueError("one stage tag per point required")
        if np.any(np.diff(self.stages) < 0):
            raise ValueError("stage tags must be nondecreasing in insertion order")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if len(self.weights) != len(self.points):
                raise ValueError("one weight per point required")
            if not np.all(self.weights > 0):
                raise ValueError("importance weights must be strictly positive")

    @classmethod
    def from_points(cls, points, stage: int = 0, weights=None, n_spatial: int = 1):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return cls(points, np.full(len(points), stage), weights, n_spatial)

    @classmethod
    def empty(cls, dim: int, n_spatial: int = 1):
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), None, n_spatial)

    def __len__(self):
        return len(self.points)

    @property
    def max_stage(self) -> int:
        return int(self.stages.max()) if len(self) else -1

    def to_csv(self, path) -> None:
        """Columns ``x_*`` (spatial), ``xi_*`` (parameters), ``stage``, ``weight``."""
        dim = self.points.shape[1]
        ns = min(self.n_spatial, dim)
        header = [f"x_{i}" for i in range(ns)] + [f"xi_{i}" for i in range(dim - ns)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header + ["stage", "weight"])
            for i, p in enumerate(self.points):
                wt = "" if self.weights is None else repr(float(self.weights[i]))
                w.writerow([repr(float(v)) for v in p] + [int(self.stages[i]), wt])

    @classmethod
    def from_csv(cls, path) -> "TrainingSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        ns = sum(h.startswith("x_") for h in header)
        dim = len(header) - 2
        pts = np.array([[float(v) for v in r[:dim]] for r in body]).reshape(-1, dim)
        stages = np.array([int(r[dim]) for r in body], dtype=np.int64)
        wcol = [r[dim + 1] for r in body]
        weights = np.array([float(v) for v in wcol]) if body and all(wcol) else None
        return cls(pts, stages, weights, ns)


def uniform_sample(domain: BoxDomain, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be >= 0")
    return domain.lower + domain.width * rng.random((n, domain.dim))


def halton_sample(domain: BoxDomain, n: int, skip: int = 0) -> np.ndarray:
    """Unscrambled Halton points ``skip+1 .. skip+n`` mapped onto the box.

    Index 0 (the origin) is always skipped.
    """
    if n < 0 or skip < 0:
        raise ValueError("n and skip must be >= 0")
    gen = qmc.Halton(domain.dim, scramble=False)
    gen.fast_forward(skip + 1)
    return domain.lower + domain.width * gen.random(n)


def rar_select(candidates, residuals, n: int) -> np.ndarray:
    """Indices of the ``n`` largest squared residuals, ties to the lower index.

    ``residuals`` is either an array aligned with ``candidates`` or a callable
    evaluated on them.
    """
    candidates = np.atleast_2d(candidates)
    if n > len(candidates):
        raise ValueError(f"cannot select {n} of {len(candidates)} candidates")
    r = residuals(candidates) if callable(residuals) else residuals
    r2 = np.square(np.asarray(r, dtype=np.float64).reshape(-1))
    return np.argsort(-r2, kind="stable")[:n]


def cutoff_h(points, domain: BoxDomain) -> np.ndarray:
    """1 on Omega, falling linearly to 0 on the boundary of B.

    Per-dimension linear factors are combined by taking their minimum.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    lo, hi = domain.outer_lower, domain.outer_upper
    if np.any(p < lo) or np.any(p > hi):
        raise ValueError("cutoff is only defined on the closed box B")
    below = (p - lo) / (domain.lower - lo)
    above = (hi - p) / (hi - domain.upper)
    return np.clip(np.minimum(below, above), 0.0, 1.0).min(axis=1)


def refine_training_set(current: TrainingSet, new: TrainingSet, mode: str = "grow",
                        density=None) -> TrainingSet:
    """Union (``grow``) or replacement (``replace``) of the training set.

    In ``replace`` mode ``density`` holds the sampling density at the new
    points and the result carries importance weights ``1 / density``.
    """
    if len(new) and len(current) and new.stages.min() <= current.max_stage:
        raise ValueError("new points must carry later stage tags than the current set")
    if mode == "grow":
        if len(new) == 0:
            return current
        return TrainingSet(
            np.concatenate([current.points, new.points]),
            np.concatenate([current.stages, new.stages]),
            None,
            current.n_spatial,
        )
    if mode == "replace":
        if density is None:
            raise ValueError("replace mode needs the sampling density of the new points")
        density = np.asarray(density, dtype=np.float64).reshape(-1)
        return TrainingSet(new.points, new.stages, 1.0 / density, current.n_spatial)
    raise ValueError(f"unknown refine mode {mode!r}")
