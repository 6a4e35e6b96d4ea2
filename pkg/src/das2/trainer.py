"""Residual losses, training loops and the adaptive sampling drivers."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .flow import BoxDomain, FlowModel, SamplingStarvation, flow_init, flow_sample, train_flow
from .nets import Ansatz, Surrogate, branch_trunk_init, mlp_init
from .optim import AdamState, adam_step
from .problems import OpLearnCheb, ParamODE, marginal_residual, residual_values, sample_ball
from .sampling import (
    RngStream,
    TrainingSet,
    cutoff_h,
    halton_sample,
    rar_select,
    refine_training_set,
    uniform_sample,
)

__all__ = [
    "AdamState",
    "AdaptiveConfig",
    "FlowSpec",
    "RunRecord",
    "RunResult",
    "SurrogateSpec",
    "Validator",
    "adam_step",
    "das2_joint",
    "das2_marginal",
    "empirical_loss",
    "evaluate_grid",
    "marginal_loss",
    "run_baseline",
    "run",
    "run_adaptive",
    "build_flow",
    "build_surrogate",
    "product_points",
    "full_set_loss",
    "train_surrogate_stage",
]

MODES = ("joint", "marginal")
REFINE_MODES = ("grow", "replace")
BASELINES = ("none", "uniform", "qrs", "rar")


@dataclass
class AdaptiveConfig:
    N_adaptive: int = 4
    N_e: int = 500
    n_r: int = 500
    m: int = 500
    m_x: int = 100
    N_r: int | None = None  # initial set size; defaults to n_r
    N_b: int = 0
    gamma: float = 0.0
    lr: float = 1e-3
    flow_lr: float = 1e-3
    flow_batch: int | None = None  # defaults to m
    flow_steps: int = 1
    seed: int = 0
    mode: str = "joint"
    refine_mode: str = "grow"
    baseline: str = "none"
    raw_weights: bool = False
    max_attempts: int = 50
    rar_pool_factor: int = 10
    val_every: int = 50
    record_timing: bool = False

    def __post_init__(self):
        if self.N_r is None:
            self.N_r = self.n_r
        if self.flow_batch is None:
            self.flow_batch = self.m
        self.validate()

    def validate(self):
        for name in ("N_adaptive", "N_e", "n_r", "m", "m_x", "N_r", "flow_batch", "flow_steps",
                     "max_attempts", "rar_pool_factor", "val_every"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.N_b < 0:
            raise ValueError("N_b must be >= 0")
        if not self.gamma >= 0:
            raise ValueError("gamma must be >= 0")
        if not (self.lr > 0 and self.flow_lr > 0):
            raise ValueError("learning rates must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.refine_mode not in REFINE_MODES:
            raise ValueError(f"refine_mode must be one of {REFINE_MODES}")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")

    @property
    def total_points(self) -> int:
        return self.N_r + (self.N_adaptive - 1) * self.n_r

    @property
    def total_epochs(self) -> int:
        return self.N_adaptive * self.N_e


@dataclass
class SurrogateSpec:
    hidden: list[int] = field(default_factory=lambda: [32] * 5)
    trunk_hidden: list[int] = field(default_factory=lambda: [50] * 4)
    branch_hidden: list[int] = field(default_factory=lambda: [50] * 4)
    width_out: int = 50


@dataclass
class FlowSpec:
    K: int = 2
    L: int = 6
    hidden: int = 24
    clamp: float = 1.5
    margin: float = 0.05


# -- losses ----------------------------------------------------------------------


def _pointwise_loss(problem, net, params, points, weights=None, gamma=0.0, boundary=None):
    r = problem.residual(net, params, points)
    sq = ad.square(r)
    if weights is not None:
        sq = sq * np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    loss = ad.sum(sq) * (1.0 / len(points))
    if gamma > 0 and boundary is not None and len(boundary):
        b = problem.boundary_residual(net, params, boundary)
        loss = loss + ad.sum(ad.square(b)) * (gamma / len(boundary))
    return loss


def _grid_loss(problem, net, params, xi, x_grid):
    if net.kind == "branch_trunk":
        r = problem.grid_residual(net, params, x_grid, xi)
        return ad.sum(ad.square(r)) * (1.0 / r.shape[0] / r.shape[1])
    return _pointwise_loss(problem, net, params, product_points(x_grid, xi))


def product_points(x_grid, xi) -> np.ndarray:
    """Rows ``(x_i, xi_j)`` ordered with ``x`` outermost."""
    x = np.asarray(x_grid, dtype=np.float64).reshape(-1)
    xi = np.atleast_2d(xi)
    return np.column_stack([np.repeat(x, len(xi)), np.tile(xi, (len(x), 1))])


def empirical_loss(s: Surrogate, points, problem, weights=None, gamma: float = 0.0,
                   boundary=None, tape: ad.Tape | None = None):
    """Mean (optionally weighted) squared residual plus the boundary penalty.

    Returns ``(loss_node, tape)`` with ``s``'s parameters as the tape's leaves.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        raise ValueError("empty collocation batch")
    tape = ad.Tape() if tape is None else tape
    params = s.bind(tape)
    return _pointwise_loss(problem, s, params, points, weights, gamma, boundary), tape


def marginal_loss(s: Surrogate, xi_batch, x_grid, problem, tape: ad.Tape | None = None):
    """Mean over ``xi_batch`` of the grid-averaged squared residual."""
    xi_batch = np.atleast_2d(np.asarray(xi_batch, dtype=np.float64))
    x_grid = np.asarray(x_grid, dtype=np.float64).reshape(-1)
    if xi_batch.size == 0 or x_grid.size == 0:
        raise ValueError("marginal loss needs a nonempty parameter batch and x grid")
    tape = ad.Tape() if tape is None else tape
    params = s.bind(tape)
    return _grid_loss(problem, s, params, xi_batch, x_grid), tape


def full_set_loss(problem, net: Surrogate, tset: TrainingSet, config: AdaptiveConfig,
                  x_grid=None, chunk: int = 4096) -> float:
    """Loss over the whole training set, evaluated in chunks (values only)."""
    total = 0.0
    for start in range(0, len(tset), chunk):
        sl = slice(start, start + chunk)
        pts = tset.points[sl]
        if config.mode == "marginal":
            total += float(np.sum(marginal_residual(problem, net, pts, x_grid)))
        else:
            r = residual_values(problem, net, pts)
            w = 1.0 if tset.weights is None else tset.weights[sl]
            total += float(np.sum(w * r * r))
    return total / len(tset)


# -- validation ------------------------------------------------------------------


def evaluate_grid(s: Surrogate, grid, oracle) -> dict:
    """MSE and relative l2 error of ``s`` against ``oracle`` on ``grid``.

    ``oracle`` is an array of reference values or a callable on the grid.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if len(grid) == 0:
        raise ValueError("empty validation grid")
    ref = np.asarray(oracle(grid) if callable(oracle) else oracle, dtype=np.float64).reshape(-1)
    return _metrics(s(grid), ref)


def _metrics(pred, ref) -> dict:
    diff = np.asarray(pred).reshape(-1) - np.asarray(ref).reshape(-1)
    norm = float(np.linalg.norm(ref))
    if norm == 0.0:
        raise ValueError("relative error undefined for a zero reference")
    return {"mse": float(np.mean(diff * diff)), "relative_l2": float(np.linalg.norm(diff) / norm)}


@dataclass
class Validator:
    """Reference values on a fixed validation set."""

    problem: object
    x_grid: np.ndarray | None = None
    xi: np.ndarray | None = None
    points: np.ndarray | None = None
    reference: np.ndarray | None = None

    @classmethod
    def meshgrid(cls, problem: ParamODE, n_x: int = 256, n_xi: int = 256) -> "Validator":
        dom = problem.domain
        xs = np.linspace(dom.lower[0], dom.upper[0], n_x)
        xis = np.linspace(dom.lower[1], dom.upper[1], n_xi)
        X, XI = np.meshgrid(xs, xis, indexing="ij")
        pts = np.column_stack([X.ravel(), XI.ravel()])
        return cls(problem, points=pts, reference=problem.exact(pts))

    @classmethod
    def operator(cls, problem: OpLearnCheb, n_uniform: int, n_ball: int, n_x: int,
                 seed: int) -> "Validator":
        rng = RngStream.named(seed, "validation").generator()
        box = problem.param_domain
        xi = np.concatenate([
            uniform_sample(box, n_uniform, rng),
            sample_ball(np.full(problem.d, 0.5), 0.5, n_ball, rng),
        ])
        x_grid = np.linspace(0.0, 1.0, n_x)
        return cls(problem, x_grid=x_grid, xi=xi, reference=problem.reference(xi, x_grid))

    @property
    def size(self) -> int:
        return int(self.reference.size)

    def evaluate(self, net: Surrogate) -> dict:
        if self.points is not None:
            return evaluate_grid(net, self.points, self.reference)
        if net.kind == "branch_trunk":
            u = np.asarray(net.forward_grid(net.params(), self.x_grid, self.xi, coord=None).primal)
            return _metrics(u.T, self.reference)
        pts = product_points(self.x_grid, self.xi)
        u = net(pts).reshape(len(self.x_grid), len(self.xi))
        return _metrics(u.T, self.reference)

    def pointwise(self, net: Surrogate):
        """``(points, reference, prediction)`` rows for export."""
        if self.points is not None:
            return self.points, self.reference, net(self.points)
        pts = product_points(self.x_grid, self.xi)
        ref = self.reference.T.reshape(-1)
        return pts, ref, net(pts)


# -- run bookkeeping -------------------------------------------------------------

CSV_HEADER = ("stage", "epoch", "phase", "loss", "val_mse", "val_rel_l2", "n_points", "wall_ms")


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)
    record_timing: bool = False

    def add(self, stage, epoch, phase, loss, n_points, val=None, wall_ms=0.0):
        self.rows.append({
            "stage": stage,
            "epoch": epoch,
            "phase": phase,
            "loss": float(loss),
            "val_mse": None if val is None else val["mse"],
            "val_rel_l2": None if val is None else val["relative_l2"],
            "n_points": int(n_points),
            "wall_ms": float(wall_ms) if self.record_timing else 0.0,
        })

    def phase_rows(self, phase: str) -> list[dict]:
        return [r for r in self.rows if r["phase"] == phase]

    def validation_by_stage(self) -> dict[int, float]:
        """Last recorded validation MSE of each stage."""
        out = {}
        for r in self.phase_rows("surrogate"):
            if r["val_mse"] is not None:
                out[r["stage"]] = r["val_mse"]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in CSV_HEADER])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunResult:
    surrogate: Surrogate
    flow: FlowModel | None
    record: RunRecord
    training_set: TrainingSet
    final: dict

    @property
    def final_mse(self) -> float:
        return self.final["mse"]


# -- model construction ----------------------------------------------------------


def build_surrogate(problem, spec: SurrogateSpec | None, seed: int) -> Surrogate:
    spec = spec or SurrogateSpec()
    kind, u0 = problem.ansatz
    init_seed = int(RngStream.named(seed, "surrogate_init").generator().integers(2**32))
    if isinstance(problem, OpLearnCheb):
        return branch_trunk_init(
            [1, *spec.trunk_hidden, spec.width_out],
            [problem.d, *spec.branch_hidden, spec.width_out],
            init_seed,
            Ansatz(kind, u0),
        )
    return mlp_init([1 + problem.d, *spec.hidden, 1], init_seed, Ansatz(kind, u0))


def build_flow(box: BoxDomain, spec: FlowSpec | None, seed: int) -> FlowModel:
    spec = spec or FlowSpec()
    init_seed = int(RngStream.named(seed, "flow_init").generator().integers(2**32))
    return flow_init(box.dim, spec.K, spec.L, spec.hidden, box, init_seed, spec.clamp)


def _sampling_box(problem, config: AdaptiveConfig, spec: FlowSpec | None) -> BoxDomain:
    margin = (spec or FlowSpec()).margin
    dom = problem.param_domain if config.mode == "marginal" else problem.domain
    return BoxDomain(dom.lower, dom.upper, margin)


def _x_grid(problem, config: AdaptiveConfig):
    if config.mode != "marginal":
        return None
    dom = problem.domain
    return np.linspace(dom.lower[0], dom.upper[0], config.m_x)


# -- training --------------------------------------------------------------------


@dataclass
class _Trainer:
    """Surrogate parameters plus optimizer state carried across stages."""

    problem: object
    net: Surrogate
    config: AdaptiveConfig
    record: RunRecord
    validator: Validator | None
    x_grid: np.ndarray | None
    rng: np.random.Generator
    state: AdamState = field(default_factory=AdamState)

    def stage(self, k: int, tset: TrainingSet, epochs: int | None = None, epoch_offset: int = 0):
        epochs = self.config.N_e if epochs is None else epochs
        self.net, self.state, _ = train_surrogate_stage(
            self.net, tset, self.config, self.problem, self.rng, self.state, self.x_grid,
            on_epoch=lambda e, loss, net, ms: self._log(k, epoch_offset + e, loss, net, len(tset),
                                                         ms, e == epochs - 1),
            epochs=epochs,
        )

    def _log(self, k, epoch, loss, net, n, ms, last):
        val = None
        if self.validator is not None and (last or (epoch + 1) % self.config.val_every == 0):
            val = self.validator.evaluate(net)
        self.record.add(k, epoch, "surrogate", loss, n, val, ms)


def train_surrogate_stage(net: Surrogate, tset: TrainingSet, config: AdaptiveConfig, problem,
                          rng: np.random.Generator, state: AdamState | None = None,
                          x_grid=None, on_epoch: Callable | None = None,
                          epochs: int | None = None):
    """``N_e`` epochs of minibatch Adam, warm-started from ``net``.

    Each epoch is one pass over a fresh permutation of the set in batches of
    ``m``. Returns ``(net, adam_state, epoch_losses)``.
    """
    if len(tset) == 0:
        raise ValueError("empty training set")
    epochs = config.N_e if epochs is None else epochs
    state = state or AdamState()
    params = [p.copy() for p in net.params()]
    losses = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(tset))
        batch_losses = []
        for start in range(0, len(tset), config.m):
            idx = order[start : start + config.m]
            tape = ad.Tape()
            pv = [tape.param(p) for p in params]
            pts = tset.points[idx]
            if config.mode == "marginal":
                loss = _grid_loss(problem, net, pv, pts, x_grid)
            else:
                w = None if tset.weights is None else tset.weights[idx]
                loss = _pointwise_loss(problem, net, pv, pts, w, config.gamma)
            grads = tape.gradient(loss)
            params, state = adam_step(params, grads, state, config.lr)
            batch_losses.append(float(loss.value))
        losses.append(float(np.mean(batch_losses)))
        if on_epoch is not None:
            on_epoch(epoch, losses[-1], net.with_params(params),
                     (time.perf_counter() - t0) * 1e3)
    return net.with_params(params), state, losses


def _target(problem, net: Surrogate, box: BoxDomain, config: AdaptiveConfig, x_grid):
    if config.mode == "marginal":
        def target(xi):
            return marginal_residual(problem, net, xi, x_grid) * cutoff_h(xi, box)
    else:
        def target(pts):
            r = residual_values(problem, net, pts)
            return r * r * cutoff_h(pts, box)
    return target


def run_adaptive(config: AdaptiveConfig, problem, surrogate_spec: SurrogateSpec | None = None,
                 flow_spec: FlowSpec | None = None, validator: Validator | None = None,
                 log: Callable[[str], None] | None = None) -> RunResult:
    """Adaptive loop shared by the joint and marginal variants.

    Per stage: train the surrogate on the current set, fit the flow to the
    residual-induced density using the previous stage's flow as proposal, then
    (except after the last stage) draw ``n_r`` new points inside Omega.
    """
    seed = config.seed
    box = _sampling_box(problem, config, flow_spec)
    x_grid = _x_grid(problem, config)
    record = RunRecord(record_timing=config.record_timing)
    net = build_surrogate(problem, surrogate_spec, seed)
    flow = build_flow(box, flow_spec, seed)
    proposal = flow.copy()

    init = uniform_sample(box, config.N_r, RngStream.named(seed, "initial_set").generator())
    weights = np.full(len(init), box.volume) if config.refine_mode == "replace" else None
    tset = TrainingSet.from_points(init, 0, weights, 0 if config.mode == "marginal" else 1)
    trainer = _Trainer(problem, net, config, record, validator, x_grid,
                       RngStream.named(seed, "minibatch").generator())
    flow_rng = RngStream.named(seed, "flow_train").generator()
    refine_rng = RngStream.named(seed, "refine").generator()

    for k in range(config.N_adaptive):
        trainer.stage(k, tset)
        stage_info = {"stage": k, "n_points": len(tset),
                      "loss": full_set_loss(problem, trainer.net, tset, config, x_grid),
                      "val_mse": record.validation_by_stage().get(k)}
        target = _target(problem, trainer.net, box, config, x_grid)

        t_last = [time.perf_counter()]

        def log_flow(epoch, loss, k=k):
            now = time.perf_counter()
            record.add(k, epoch, "flow", loss, config.flow_batch, None, (now - t_last[0]) * 1e3)
            t_last[0] = now

        flow, _, _ = train_flow(flow, proposal, target, config.N_e, config.flow_batch, flow_rng,
                                config.flow_lr, config.flow_steps, not config.raw_weights,
                                on_epoch=log_flow)
        if k < config.N_adaptive - 1:
            try:
                new, rate = flow_sample(flow, config.n_r, refine_rng, restrict=box,
                                        max_attempts=config.max_attempts, return_rate=True)
            except SamplingStarvation as exc:
                raise SamplingStarvation(exc.accepted, exc.drawn, exc.wanted, stage=k) from exc
            density = np.exp(flow.logpdf(new)) if config.refine_mode == "replace" else None
            tset = refine_training_set(
                tset, TrainingSet.from_points(new, k + 1, n_spatial=tset.n_spatial),
                config.refine_mode, density,
            )
            stage_info["acceptance_rate"] = rate
        record.stages.append(stage_info)
        proposal = flow.copy()
        if log:
            log(f"stage {k}: loss {stage_info['loss']:.4g} val_mse {stage_info['val_mse']}")

    final = validator.evaluate(trainer.net) if validator is not None else {}
    return RunResult(trainer.net, flow, record, tset, final)


def das2_joint(config: AdaptiveConfig, problem, **kw) -> RunResult:
    if config.mode != "joint":
        raise ValueError("das2_joint needs mode='joint'")
    return run_adaptive(config, problem, **kw)


def das2_marginal(config: AdaptiveConfig, problem, **kw) -> RunResult:
    if config.mode != "marginal":
        raise ValueError("das2_marginal needs mode='marginal'")
    return run_adaptive(config, problem, **kw)


def run_baseline(config: AdaptiveConfig, problem, surrogate_spec: SurrogateSpec | None = None,
                 flow_spec: FlowSpec | None = None, validator: Validator | None = None,
                 log: Callable[[str], None] | None = None) -> RunResult:
    """Non-adaptive (uniform, qrs) or RAR training under the adaptive run's budget.

    Uniform and QRS train on ``config.total_points`` points for
    ``config.total_epochs`` epochs. RAR follows the adaptive schedule but adds
    the ``n_r`` top-residual points of a uniform candidate pool each stage.
    """
    if config.baseline == "none":
        raise ValueError("run_baseline needs a baseline other than 'none'")
    seed = config.seed
    box = _sampling_box(problem, config, flow_spec)
    x_grid = _x_grid(problem, config)
    record = RunRecord(record_timing=config.record_timing)
    net = build_surrogate(problem, surrogate_spec, seed)
    n_spatial = 0 if config.mode == "marginal" else 1
    init_rng = RngStream.named(seed, "initial_set").generator()
    trainer = _Trainer(problem, net, config, record, validator, x_grid,
                       RngStream.named(seed, "minibatch").generator())

    if config.baseline in ("uniform", "qrs"):
        n = config.total_points
        pts = uniform_sample(box, n, init_rng) if config.baseline == "uniform" \
            else halton_sample(box, n)
        tset = TrainingSet.from_points(pts, 0, n_spatial=n_spatial)
        for k in range(config.N_adaptive):
            trainer.stage(k, tset)
            record.stages.append({"stage": k, "n_points": len(tset)})
    else:
        tset = TrainingSet.from_points(uniform_sample(box, config.N_r, init_rng), 0,
                                       n_spatial=n_spatial)
        pool_rng = RngStream.named(seed, "rar_pool").generator()
        for k in range(config.N_adaptive):
            trainer.stage(k, tset)
            record.stages.append({"stage": k, "n_points": len(tset)})
            if k < config.N_adaptive - 1:
                pool = uniform_sample(box, config.rar_pool_factor * config.n_r, pool_rng)
                if config.mode == "marginal":
                    r = np.sqrt(marginal_residual(problem, trainer.net, pool, x_grid))
                else:
                    r = residual_values(problem, trainer.net, pool)
                idx = rar_select(pool, r, config.n_r)
                tset = refine_training_set(
                    tset, TrainingSet.from_points(pool[idx], k + 1, n_spatial=n_spatial), "grow")
            if log:
                log(f"rar stage {k}: {len(tset)} points")
    final = validator.evaluate(trainer.net) if validator is not None else {}
    return RunResult(trainer.net, None, record, tset, final)


def run(config: AdaptiveConfig, problem, **kw) -> RunResult:
    if config.baseline != "none":
        return run_baseline(config, problem, **kw)
    return run_adaptive(config, problem, **kw)
