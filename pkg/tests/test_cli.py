import csv
import io
import json

import numpy as np
import pytest

from das2 import cli
from das2.cli import ConfigError, load_config, main, parse_config

TINY = {
    "problem": {"name": "param_ode"},
    "surrogate": {"hidden": [6, 6]},
    "flow": {"K": 1, "L": 2, "hidden": 6, "margin": 0.02},
    "adaptive": {"N_adaptive": 2, "N_e": 3, "n_r": 30, "m": 15, "seed": 0, "val_every": 1},
    "validation": {"n_x": 8, "n_xi": 8},
}

TINY_OP = {
    "problem": {"name": "oplearn_cheb", "d": 2},
    "surrogate": {"trunk_hidden": [5], "branch_hidden": [5], "width_out": 3},
    "flow": {"K": 1, "L": 2, "hidden": 6},
    "adaptive": {"mode": "marginal", "N_adaptive": 2, "N_e": 2, "n_r": 20, "m": 10, "m_x": 8},
    "validation": {"n_uniform": 4, "n_ball": 4, "n_x": 5},
}


def dump(obj) -> str:
    return json.dumps(obj, indent=2)


def with_(base, section, **kw):
    out = json.loads(json.dumps(base))
    out[section].update(kw)
    return out


@pytest.fixture
def tiny_run(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(dump(TINY))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    return out


# -- config parsing -------------------------------------------------------------


def test_parse_resolves_defaults():
    cfg = parse_config(dump(TINY))
    assert cfg.problem == {"name": "param_ode", "u0": 1.0, "xi_low": -3.0, "xi_high": 3.0}
    assert cfg.adaptive.N_r == 30 and cfg.adaptive.mode == "joint"
    assert cfg.output_dir == "runs/experiment"


def test_unknown_top_level_key():
    text = dump({**TINY, "extras": 1})
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == "extras"
    assert exc.value.line == text.splitlines().index('  "extras": 1') + 1


def test_unknown_nested_key_reports_field_and_line():
    text = dump(with_(TINY, "adaptive", learning_rate=0.1))
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == "adaptive.learning_rate"
    assert '"learning_rate"' in text.splitlines()[exc.value.line - 1]


def test_zero_refinement_size_rejected():
    text = dump(with_(TINY, "adaptive", n_r=0))
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == "adaptive.n_r"
    assert '"n_r": 0' in text.splitlines()[exc.value.line - 1]


@pytest.mark.parametrize("section,key,value", [
    ("problem", "name", "heat"), ("problem", "d", 3), ("flow", "margin", 0.0),
    ("flow", "K", 0), ("validation", "n_x", 0), ("adaptive", "lr", -1.0),
])
def test_invalid_values_rejected(section, key, value):
    with pytest.raises(ConfigError) as exc:
        parse_config(dump(with_(TINY, section, **{key: value})))
    assert exc.value.field.startswith(section)


def test_marginal_mode_needs_parameter_space():
    with pytest.raises(ConfigError, match="marginal"):
        parse_config(dump(with_(TINY, "adaptive", mode="marginal")))


def test_malformed_json_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config('{\n  "problem": {"name": "param_ode"},\n  oops\n}')
    assert exc.value.line == 3


def test_config_hash_tracks_semantic_fields():
    base = parse_config(dump(TINY))
    same = parse_config(dump({**TINY, "output_dir": "elsewhere"}))
    reordered = parse_config(json.dumps(dict(reversed(list(TINY.items())))))
    explicit_default = parse_config(dump(with_(TINY, "problem", u0=1.0)))
    assert base.config_hash == same.config_hash == reordered.config_hash
    assert base.config_hash == explicit_default.config_hash
    for section, kw in [("adaptive", {"seed": 1}), ("adaptive", {"lr": 2e-3}),
                        ("flow", {"margin": 0.03}), ("problem", {"u0": 2.0}),
                        ("validation", {"n_x": 9}), ("surrogate", {"hidden": [6, 7]})]:
        assert parse_config(dump(with_(TINY, section, **kw))).config_hash != base.config_hash


@pytest.mark.parametrize("name", ["ode_desk", "oplearn_desk", "ode_full", "oplearn_full"])
def test_bundled_configs_parse(name):
    cfg = load_config(name)
    assert cfg.output_dir == f"runs/{name}"
    assert name in cli.bundled_configs()


def test_ode_desk_settings():
    a = load_config("ode_desk").adaptive
    assert (a.N_adaptive, a.n_r, a.N_e, a.m) == (4, 500, 500, 500)
    op = load_config("oplearn_desk")
    assert op.problem["d"] == 5 and op.adaptive.mode == "marginal"
    assert (op.adaptive.N_adaptive, op.adaptive.n_r, op.adaptive.m_x) == (4, 2500, 100)
    assert op.adaptive.total_points == 10_000


def test_missing_config():
    with pytest.raises(ConfigError, match="bundled"):
        load_config("no_such_config")


# -- run ------------------------------------------------------------------------


def test_run_writes_artifacts(tiny_run, capsys):
    names = {p.name for p in tiny_run.iterdir()}
    assert names == {"metrics.csv", "summary.json", "config.json", "stages.json", "timing.json",
                     "surrogate.json", "flow.json", "training_set.csv"}
    rows = list(csv.DictReader(io.StringIO((tiny_run / "metrics.csv").read_text())))
    assert sum(r["phase"] == "surrogate" for r in rows) == 2 * 3
    summary = json.loads((tiny_run / "summary.json").read_text())
    assert set(summary) == {"final_mse", "final_rel_l2", "budget", "seed", "config_hash"}
    assert summary["budget"] == {"points": 60, "epochs": 6}
    assert summary["config_hash"] == parse_config(dump(TINY)).config_hash


def test_run_only_writes_under_output_dir(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(dump({**TINY, "output_dir": "results/a"}))
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    assert main(["run", "--config", str(cfg), "--quiet"]) == 0
    written = [p.relative_to(work) for p in work.rglob("*") if p.is_file()]
    assert written and all(p.parts[:2] == ("results", "a") for p in written)


def test_seed_override_is_reproducible(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(dump(TINY))
    outs = []
    for tag in "ab":
        out = tmp_path / tag
        assert main(["run", "--config", str(cfg), "--seed", "1", "--out", str(out), "--quiet"]) == 0
        outs.append(out)
    assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
    assert (outs[0] / "surrogate.json").read_bytes() == (outs[1] / "surrogate.json").read_bytes()
    assert json.loads((outs[0] / "summary.json").read_text())["seed"] == 1


def test_run_invalid_config_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(dump(with_(TINY, "adaptive", n_r=0)))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "adaptive.n_r" in err and "line" in err
    assert not (tmp_path / "o").exists()


def test_run_failure_reports_stage(tmp_path, capsys, monkeypatch):
    from das2 import trainer
    from das2.flow import SamplingStarvation

    def starving(*a, **k):
        raise SamplingStarvation(0, 100, 30)

    monkeypatch.setattr(trainer, "flow_sample", starving)
    cfg = tmp_path / "c.json"
    cfg.write_text(dump(TINY))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 1
    assert "stage 0" in capsys.readouterr().err


def test_marginal_run(tmp_path):
    cfg = tmp_path / "op.json"
    cfg.write_text(dump(TINY_OP))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    header = (tmp_path / "o" / "training_set.csv").read_text().splitlines()[0]
    assert header.count("xi") == 2


# -- eval -----------------------------------------------------------------------


def test_eval_reproduces_summary(tiny_run, capsys):
    capsys.readouterr()
    code = main(["eval", "--checkpoint", str(tiny_run / "surrogate.json"),
                 "--problem", "param_ode", "--grid", "8x8"])
    assert code == 0
    got = json.loads(capsys.readouterr().out)
    want = json.loads((tiny_run / "summary.json").read_text())
    assert got["mse"] == pytest.approx(want["final_mse"], abs=1e-12)
    assert got["relative_l2"] == pytest.approx(want["final_rel_l2"], abs=1e-12)
    assert got["n_points"] == 64


def test_eval_export_rows(tiny_run, tmp_path):
    path = tmp_path / "pw.csv"
    assert main(["eval", "--checkpoint", str(tiny_run / "surrogate.json"), "--problem",
                 "param_ode", "--grid", "5x7", "--export", str(path)]) == 0
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == 35
    assert set(rows[0]) == {"x_0", "xi_0", "reference", "prediction", "abs_error"}
    r = rows[3]
    assert float(r["abs_error"]) == abs(float(r["prediction"]) - float(r["reference"]))


def test_eval_rejects_mismatch(tiny_run, capsys):
    ck = str(tiny_run / "surrogate.json")
    assert main(["eval", "--checkpoint", ck, "--problem", "oplearn_cheb", "--grid", "2,2,3"]) == 2
    assert "ansatz" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tiny_run / "flow.json"), "--problem", "param_ode",
                 "--grid", "4x4"]) == 2
    assert "not a surrogate" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", ck, "--problem", "param_ode", "--grid", "4by4"]) == 2


def test_eval_rejects_dimension_mismatch(tmp_path, capsys):
    cfg = tmp_path / "op.json"
    cfg.write_text(dump(TINY_OP))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    ck = str(tmp_path / "o" / "surrogate.json")
    assert main(["eval", "--checkpoint", ck, "--problem", "oplearn_cheb", "--grid", "2,2,3",
                 "--set", "d=3"]) == 2
    assert "dimension" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", ck, "--problem", "oplearn_cheb", "--grid", "2,2,3",
                 "--set", "d=2"]) == 0


# -- sample ---------------------------------------------------------------------


def test_sample_zero_is_header_only(tiny_run, capsys):
    capsys.readouterr()
    assert main(["sample", "--flow", str(tiny_run / "flow.json"), "--n", "0", "--seed", "3",
                 "--spatial-dims", "1"]) == 0
    assert capsys.readouterr().out == "x_0,xi_0\n"


def test_sample_restricted_inside_domain(tiny_run, tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["sample", "--flow", str(tiny_run / "flow.json"), "--n", "300", "--seed", "1",
                 "--restrict", "--out", str(out)]) == 0
    pts = np.loadtxt(out, delimiter=",", skiprows=1)
    assert pts.shape == (300, 2)
    assert np.all((pts[:, 0] >= 0) & (pts[:, 0] <= 1) & (pts[:, 1] >= -3) & (pts[:, 1] <= 3))
    assert "acceptance rate" in capsys.readouterr().err


def test_sample_unrestricted_stays_in_outer_box(tiny_run, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sample", "--flow", str(tiny_run / "flow.json"), "--n", "500",
                 "--out", str(out)]) == 0
    pts = np.loadtxt(out, delimiter=",", skiprows=1)
    assert np.all((pts[:, 1] > -3.12) & (pts[:, 1] < 3.12))


def test_sample_fixed_seed_identical_bytes(tiny_run, tmp_path):
    outs = []
    for tag in "ab":
        out = tmp_path / f"{tag}.csv"
        assert main(["sample", "--flow", str(tiny_run / "flow.json"), "--n", "50", "--seed", "7",
                     "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    other = tmp_path / "c.csv"
    main(["sample", "--flow", str(tiny_run / "flow.json"), "--n", "50", "--seed", "8",
          "--out", str(other)])
    assert other.read_bytes() != outs[0]


def test_sample_errors(tiny_run, capsys):
    assert main(["sample", "--flow", str(tiny_run / "surrogate.json"), "--n", "5"]) == 2
    assert main(["sample", "--flow", str(tiny_run / "flow.json"), "--n", "-1"]) == 2


def test_thread_limit_env(monkeypatch):
    monkeypatch.setenv("DAS2_THREADS", "0")
    with pytest.raises(SystemExit):
        cli.thread_limit()
    monkeypatch.setenv("DAS2_THREADS", "3")
    assert cli.thread_limit() == 3
    monkeypatch.delenv("DAS2_THREADS")
    assert cli.thread_limit() == 1
