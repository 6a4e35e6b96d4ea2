"""Command-line runner: ``das2 run``, ``das2 eval`` and ``das2 sample``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .flow import FlowModel, SamplingStarvation, flow_sample
from .nets import Surrogate
from .problems import PROBLEMS, OpLearnCheb, make_problem
from .sampling import RngStream
from .trainer import AdaptiveConfig, FlowSpec, SurrogateSpec, Validator, run


class ConfigError(ValueError):
    """Invalid experiment configuration, with the offending field and line."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.field, self.line = field, line


SECTIONS = {"problem", "surrogate", "flow", "adaptive", "validation", "output_dir"}


@dataclass
class ExperimentConfig:
    problem: dict
    surrogate: SurrogateSpec
    flow: FlowSpec
    adaptive: AdaptiveConfig
    validation: dict
    output_dir: str = "runs/experiment"

    def make_problem(self):
        consts = {k: v for k, v in self.problem.items() if k != "name"}
        return make_problem(self.problem["name"], **consts)

    def canonical(self) -> dict:
        """Fully resolved config, excluding the output location."""
        return {
            "problem": self.problem,
            "surrogate": dataclasses.asdict(self.surrogate),
            "flow": dataclasses.asdict(self.flow),
            "adaptive": dataclasses.asdict(self.adaptive),
            "validation": self.validation,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validator(self) -> Validator:
        prob = self.make_problem()
        v = self.validation
        if isinstance(prob, OpLearnCheb):
            return Validator.operator(prob, v["n_uniform"], v["n_ball"], v["n_x"], v["seed"])
        return Validator.meshgrid(prob, v["n_x"], v["n_xi"])


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _section(obj, name, text, allowed):
    sec = obj.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError("expected an object", name, _line_of(text, name))
    for k in sec:
        if k not in allowed:
            raise ConfigError("unknown key", f"{name}.{k}", _line_of(text, k))
    return dict(sec)


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def parse_config(text: str, default_output: str = "runs/experiment") -> ExperimentConfig:
    """Parse and validate an experiment config from JSON text."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from None
    if not isinstance(obj, dict):
        raise ConfigError("top level must be an object", line=1)
    for k in obj:
        if k not in SECTIONS:
            raise ConfigError("unknown key", k, _line_of(text, k))

    prob = _section(obj, "problem", text, {"name", "u0", "xi_low", "xi_high", "d", "M", "D"})
    name = prob.get("name")
    if name not in PROBLEMS:
        raise ConfigError(f"unknown problem {name!r}; expected one of {sorted(PROBLEMS)}",
                          "problem.name", _line_of(text, "name"))
    cls = PROBLEMS[name]
    consts = {k: v for k, v in prob.items() if k != "name"}
    for k in consts:
        if k not in _fields(cls) or k == "name":
            raise ConfigError(f"not a constant of {name}", f"problem.{k}", _line_of(text, k))
    try:
        problem = cls(**consts)
    except TypeError as exc:
        raise ConfigError(str(exc), "problem") from None
    resolved_problem = {"name": name, **{k: getattr(problem, k) for k in _fields(cls) if k != "name"}}

    sections = {}
    for sec_name, spec_cls in (("surrogate", SurrogateSpec), ("flow", FlowSpec),
                               ("adaptive", AdaptiveConfig)):
        raw = _section(obj, sec_name, text, _fields(spec_cls))
        try:
            sections[sec_name] = spec_cls(**raw)
        except (TypeError, ValueError) as exc:
            head = str(exc).split()[0]
            bad = head if head in raw else next((k for k in raw if k in ("lr", "flow_lr")), None)
            raise ConfigError(str(exc), f"{sec_name}.{bad}" if bad else sec_name,
                              _line_of(text, bad) if bad else _line_of(text, sec_name)) from None
    _check_flow(sections["flow"], text)
    adaptive = sections["adaptive"]
    if adaptive.mode == "marginal" and not isinstance(problem, OpLearnCheb):
        raise ConfigError("marginal mode needs a problem with a separate parameter space",
                          "adaptive.mode", _line_of(text, "mode"))

    if isinstance(problem, OpLearnCheb):
        vdef = {"n_uniform": 1000, "n_ball": 1000, "n_x": 51, "seed": 0}
    else:
        vdef = {"n_x": 256, "n_xi": 256}
    vraw = _section(obj, "validation", text, set(vdef))
    validation = {**vdef, **vraw}
    for k, v in validation.items():
        if not isinstance(v, int) or isinstance(v, bool) or v < (0 if k == "seed" else 1):
            raise ConfigError("must be a positive integer", f"validation.{k}", _line_of(text, k))

    out = obj.get("output_dir", default_output)
    if not isinstance(out, str) or not out:
        raise ConfigError("must be a nonempty string", "output_dir", _line_of(text, "output_dir"))
    return ExperimentConfig(resolved_problem, sections["surrogate"], sections["flow"], adaptive,
                            validation, out)


def _check_flow(spec: FlowSpec, text: str):
    for k in ("K", "L", "hidden"):
        v = getattr(spec, k)
        if not isinstance(v, int) or v < 1:
            raise ConfigError("must be a positive integer", f"flow.{k}", _line_of(text, k))
    if not spec.margin > 0:
        raise ConfigError("must be > 0", "flow.margin", _line_of(text, "margin"))
    if not spec.clamp > 0:
        raise ConfigError("must be > 0", "flow.clamp", _line_of(text, "clamp"))


def bundled_configs() -> list[str]:
    root = resources.files("das2") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(ref: str) -> ExperimentConfig:
    """Load a config from a path, or by bundled name such as ``ode_desk``."""
    path = Path(ref)
    if path.is_file():
        return parse_config(path.read_text(), f"runs/{path.stem}")
    name = ref[:-5] if ref.endswith(".json") else ref
    if name in bundled_configs():
        text = (resources.files("das2") / "configs" / f"{name}.json").read_text()
        return parse_config(text, f"runs/{name}")
    raise ConfigError(f"no config file or bundled config named {ref!r} "
                      f"(bundled: {', '.join(bundled_configs())})")


# -- run --------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, out_dir: Path, log=None) -> dict:
    """Run one experiment and write every artifact under ``out_dir``."""
    problem = cfg.make_problem()
    validator = cfg.validator()
    t0 = time.perf_counter()
    result = run(cfg.adaptive, problem, surrogate_spec=cfg.surrogate, flow_spec=cfg.flow,
                 validator=validator, log=log)
    elapsed = time.perf_counter() - t0
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(result.record.to_csv())
    summary = {
        "final_mse": result.final["mse"],
        "final_rel_l2": result.final["relative_l2"],
        "budget": {"points": len(result.training_set),
                   "epochs": cfg.adaptive.total_epochs},
        "seed": cfg.adaptive.seed,
        "config_hash": cfg.config_hash,
    }
    _write_json(out_dir / "summary.json", summary)
    _write_json(out_dir / "config.json", {**cfg.canonical(), "output_dir": str(out_dir)})
    _write_json(out_dir / "stages.json", result.record.stages)
    _write_json(out_dir / "timing.json", {"wall_seconds": elapsed})
    result.surrogate.save(out_dir / "surrogate.json")
    if result.flow is not None:
        result.flow.save(out_dir / "flow.json")
    result.training_set.to_csv(out_dir / "training_set.csv")
    return summary


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.adaptive = dataclasses.replace(cfg.adaptive, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        summary = run_experiment(cfg, out, log)
    except (SamplingStarvation, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


# -- eval -------------------------------------------------------------------------


def parse_grid_spec(spec: str, problem) -> Validator:
    """``NxM`` for the parametric ODE; ``n_uniform,n_ball,n_x[,seed]`` for operator learning."""
    try:
        if isinstance(problem, OpLearnCheb):
            parts = [int(p) for p in spec.split(",")]
            if len(parts) not in (3, 4) or min(parts[:3]) < 1:
                raise ValueError
            seed = parts[3] if len(parts) == 4 else 0
            return Validator.operator(problem, parts[0], parts[1], parts[2], seed)
        n_x, n_xi = (int(p) for p in spec.lower().split("x"))
        if min(n_x, n_xi) < 1:
            raise ValueError
        return Validator.meshgrid(problem, n_x, n_xi)
    except ValueError:
        form = "n_uniform,n_ball,n_x[,seed]" if isinstance(problem, OpLearnCheb) else "NxM"
        raise ValueError(f"bad grid spec {spec!r}; expected {form}") from None


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        out[key] = json.loads(val)
    return out


def check_compatible(net: Surrogate, problem) -> None:
    kind, _ = problem.ansatz
    if net.ansatz.kind != kind:
        raise ValueError(f"checkpoint uses the {net.ansatz.kind} ansatz; "
                         f"{problem.name} needs {kind}")
    if net.input_dim != 1 + problem.d:
        raise ValueError(f"checkpoint input dimension {net.input_dim} does not match "
                         f"{problem.name} with d = {problem.d}")


def _cmd_eval(args) -> int:
    try:
        obj = json.loads(Path(args.checkpoint).read_text())
        if obj.get("kind") not in ("mlp", "branch_trunk"):
            raise ValueError(f"{args.checkpoint} is not a surrogate checkpoint "
                             f"(kind {obj.get('kind')!r})")
        net = Surrogate.from_json(obj)
        problem = make_problem(args.problem, **_parse_sets(args.set))
        check_compatible(net, problem)
        validator = parse_grid_spec(args.grid, problem)
        metrics = validator.evaluate(net)
    except (OSError, ValueError, TypeError, KeyError) as exc:
        print(f"eval failed: {exc}", file=sys.stderr)
        return 2
    if args.export:
        pts, ref, pred = validator.pointwise(net)
        with open(args.export, "w", newline="") as fh:
            _write_rows(fh, pts, 1, {"reference": ref, "prediction": pred,
                                     "abs_error": np.abs(pred - ref)})
    print(json.dumps({"mse": metrics["mse"], "relative_l2": metrics["relative_l2"],
                      "n_points": validator.size}, sort_keys=True))
    return 0


# -- sample -----------------------------------------------------------------------


def _point_header(dim: int, n_spatial: int) -> list[str]:
    return [f"x_{i}" for i in range(n_spatial)] + [f"xi_{i}" for i in range(dim - n_spatial)]


def _cmd_sample(args) -> int:
    try:
        obj = json.loads(Path(args.flow).read_text())
        if obj.get("kind") != "flow":
            raise ValueError(f"{args.flow} is not a flow checkpoint (kind {obj.get('kind')!r})")
        flow = FlowModel.from_json(obj)
        if args.n < 0:
            raise ValueError("--n must be >= 0")
    except (OSError, ValueError, KeyError) as exc:
        print(f"sample failed: {exc}", file=sys.stderr)
        return 2
    rng = RngStream(args.seed, 0).generator()
    rate = None
    if args.n == 0:
        pts = np.zeros((0, flow.dim))
    else:
        try:
            if args.restrict:
                pts, rate = flow_sample(flow, args.n, rng, restrict=True, return_rate=True)
            else:
                pts = flow_sample(flow, args.n, rng)
        except SamplingStarvation as exc:
            print(f"sample failed: {exc}", file=sys.stderr)
            return 1
    if args.out:
        with open(args.out, "w", newline="") as fh:
            _write_rows(fh, pts, args.spatial_dims)
    else:
        _write_rows(sys.stdout, pts, args.spatial_dims)
    if rate is not None:
        print(f"acceptance rate: {rate:.6g}", file=sys.stderr)
    return 0


def _write_rows(fh, pts, n_spatial: int, extra: dict | None = None):
    extra = extra or {}
    cols = [np.asarray(v).reshape(-1) for v in extra.values()]
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(_point_header(pts.shape[1], min(n_spatial, pts.shape[1])) + list(extra))
    for i, p in enumerate(pts):
        w.writerow([repr(float(v)) for v in p] + [repr(float(c[i])) for c in cols])


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="das2", description="Deep adaptive sampling for surrogate models.")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True,
                   help="config path or bundled name (" + ", ".join(bundled_configs()) + ")")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--out", help="output directory (default: the config's output_dir)")
    r.add_argument("--quiet", action="store_true", help="suppress per-stage progress")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("eval", help="evaluate a surrogate checkpoint on a validation grid")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--problem", required=True, choices=sorted(PROBLEMS))
    e.add_argument("--grid", required=True,
                   help="NxM (param_ode) or n_uniform,n_ball,n_x[,seed] (oplearn_cheb)")
    e.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="problem constant, e.g. d=5 (repeatable)")
    e.add_argument("--export", help="write pointwise errors to this CSV")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("sample", help="draw points from a flow checkpoint")
    s.add_argument("--flow", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--restrict", action="store_true", help="keep only points inside Omega")
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.add_argument("--spatial-dims", type=int, default=0,
                   help="leading columns to label x_* instead of xi_*")
    s.set_defaults(func=_cmd_sample)
    return ap


def thread_limit() -> int:
    raw = os.environ.get("DAS2_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"DAS2_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise SystemExit(f"DAS2_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    with threadpool_limits(limits=thread_limit()):
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
