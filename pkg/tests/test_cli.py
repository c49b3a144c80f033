"""Config loading and command-line behavior.

Commands run in-process through `cli.main` for speed; one subprocess
test exercises the installed entry point.
"""

import json
import subprocess
import sys

import numpy as np
import pytest
from pydantic import ValidationError

from codiff import cli
from codiff.config import RunConfig, config_schema, load_config
from codiff.diffusion import VpSchedule
from codiff.driver import LoopConfig, NumericFailureError, OptimizerState
from codiff.evaluation import SpceConfig, read_design_sequence
from codiff.models import LinearGaussian1D, SourceLocation


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("CODIFF_SEED", raising=False)


def make_config(tmp_path, name="cfg.json", **overrides):
    body = {
        "schema_version": 1,
        "seed": 0,
        "out_dir": str(tmp_path / "out"),
        "model": {"id": "linear_gaussian"},
        "sampler": {"gamma0": 0.05},
        "loop": {"t_outer": 25, "s_joint": 1, "s_pooled": 1, "n_joint": 48, "n_contrastive": 48},
        "sequential": {"n_experiments": 2, "theta_star": [0.7]},
        "evaluation": {"n_contrastive": 256, "w2_samples": 300},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(body.get(key), dict):
            body[key] = {**body[key], **value}
        else:
            body[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(body))
    return path


def split_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], lines[1].split(","), [line.split(",") for line in lines[2:]]


def drop_column(path, name):
    """CSV rows with the named column removed, for wall-clock-free diffs."""
    tag, header, rows = split_csv(path)
    idx = header.index(name)
    keep = lambda row: row[:idx] + row[idx + 1 :]
    return [tag, keep(header)] + [keep(r) for r in rows]


# ---------------------------------------------------------------- config


def test_config_round_trip(tmp_path):
    path = make_config(tmp_path, seed=7, loop={"driver": "nested", "t_outer": 3})
    cfg = load_config(path)
    assert cfg.seed == 7
    assert cfg.loop.driver == "nested"
    assert cfg.loop.t_outer == 3
    assert isinstance(cfg.build_model(), LinearGaussian1D)
    assert isinstance(cfg.optimizer.build(cfg.design_bounds()), OptimizerState)
    assert isinstance(cfg.loop.build(cfg.sampler.build()), LoopConfig)
    assert isinstance(cfg.evaluation.build(), SpceConfig)
    assert isinstance(cfg.diffusion.build(), VpSchedule)


def test_config_rejects_unknown_keys(tmp_path):
    path = make_config(tmp_path, loop={"t_outre": 3})
    with pytest.raises(ValidationError):
        load_config(path)


def test_config_rejects_foreign_schema_version(tmp_path):
    path = make_config(tmp_path, schema_version=2)
    with pytest.raises(ValidationError):
        load_config(path)


def test_config_sigma_defaults_per_model(tmp_path):
    linear = load_config(make_config(tmp_path, "a.json"))
    source = load_config(make_config(tmp_path, "b.json", model={"id": "source_location"}))
    assert linear.build_model().sigma == 1.0
    built = source.build_model()
    assert isinstance(built, SourceLocation)
    assert built.sigma == 0.5


def test_config_design_bounds_override(tmp_path):
    path = make_config(tmp_path, model={"design_bounds": [[-5.0, 5.0]]})
    model = load_config(path).build_model()
    np.testing.assert_array_equal(model.default_design_bounds, [[-5.0, 5.0]])


def test_schema_export_lists_sections():
    schema = config_schema()
    assert "loop" in schema["properties"]
    assert schema["properties"]["schema_version"]["default"] == 1


def test_print_schema_flag(capsys):
    assert cli.main(["--print-config-schema"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out)["properties"]["seed"]["default"] == 0


# ------------------------------------------------------------- run-static


def test_run_static_writes_trace_and_state(tmp_path):
    path = make_config(tmp_path)
    assert cli.main(["run-static", "--config", str(path)]) == 0
    tag, header, rows = split_csv(tmp_path / "out" / "trace.csv")
    assert tag == "# codiff.trace.v1"
    assert header == ["iter", "xi_1", "grad_norm", "ess_min", "cloud_stamp", "wall_ms", "flags"]
    assert [int(r[0]) for r in rows] == list(range(25))
    assert all(-2.0 <= float(r[1]) <= 2.0 for r in rows)
    state = json.loads((tmp_path / "out" / "final_state.json").read_text())
    assert state["command"] == "run-static"
    assert state["iterations"] == 25
    assert -2.0 <= state["design"][0] <= 2.0


def test_run_static_zero_iterations(tmp_path):
    path = make_config(tmp_path, loop={"t_outer": 0})
    assert cli.main(["run-static", "--config", str(path)]) == 0
    lines = (tmp_path / "out" / "trace.csv").read_text().splitlines()
    assert len(lines) == 2  # schema tag + header, no data rows


def test_run_static_out_flag_overrides_config(tmp_path):
    path = make_config(tmp_path, loop={"t_outer": 1})
    assert cli.main(["run-static", "--config", str(path), "--out", str(tmp_path / "elsewhere")]) == 0
    assert (tmp_path / "elsewhere" / "trace.csv").exists()
    assert not (tmp_path / "out").exists()


def test_repeat_runs_byte_identical_up_to_wall_time(tmp_path):
    path = make_config(tmp_path)
    assert cli.main(["run-static", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run-static", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
    first = drop_column(tmp_path / "a" / "trace.csv", "wall_ms")
    second = drop_column(tmp_path / "b" / "trace.csv", "wall_ms")
    assert first == second
    state_a = (tmp_path / "a" / "final_state.json").read_text()
    state_b = (tmp_path / "b" / "final_state.json").read_text()
    assert state_a == state_b


def test_seed_precedence(tmp_path, monkeypatch):
    path = make_config(tmp_path)

    def run(out, *extra):
        assert cli.main(["run-static", "--config", str(path), "--out", str(tmp_path / out), *extra]) == 0
        return drop_column(tmp_path / out / "trace.csv", "wall_ms")

    base = run("s0")
    flagged = run("s1", "--seed", "1")
    assert flagged != base
    monkeypatch.setenv("CODIFF_SEED", "0")
    env_wins = run("s2", "--seed", "1")
    assert env_wins == base


def test_bad_env_seed_is_rejected(tmp_path, monkeypatch, capsys):
    path = make_config(tmp_path)
    monkeypatch.setenv("CODIFF_SEED", "many")
    assert cli.main(["run-static", "--config", str(path)]) == 2
    assert "CODIFF_SEED" in capsys.readouterr().err


# -------------------------------------------------------------- failures


def test_malformed_json_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert cli.main(["run-static", "--config", str(path)]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_unknown_key_exits_2(tmp_path, capsys):
    path = make_config(tmp_path, loop={"t_outre": 3})
    assert cli.main(["run-static", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "invalid config" in err and "t_outre" in err


def test_missing_config_exits_2(tmp_path):
    assert cli.main(["run-static", "--config", str(tmp_path / "nope.json")]) == 2


def test_no_command_exits_2(capsys):
    assert cli.main([]) == 2
    capsys.readouterr()


def test_numeric_failure_exits_3(tmp_path, monkeypatch, capsys):
    path = make_config(tmp_path)

    def boom(*args, **kwargs):
        raise NumericFailureError(7, "likelihood underflow")

    monkeypatch.setattr(cli, "cmd_run_static", boom)
    assert cli.main(["run-static", "--config", str(path)]) == 3
    err = capsys.readouterr().err
    assert "numeric failure" in err and "iteration 7" in err


# --------------------------------------------------------- run-sequential


def test_run_sequential_outputs(tmp_path):
    path = make_config(tmp_path)
    assert cli.main(["run-sequential", "--config", str(path)]) == 0
    tag, header, rows = split_csv(tmp_path / "out" / "metrics.csv")
    assert tag == "# codiff.metrics.v1"
    assert header == ["k", "spce", "snmc", "w2", "wall_ms"]
    assert [int(r[0]) for r in rows] == [1, 2]
    for r in rows:
        assert float(r[1]) <= float(r[2]) + 1e-9  # lower bound below upper
    designs, outcomes = read_design_sequence(tmp_path / "out" / "designs.csv")
    assert designs.shape == (2, 1) and outcomes.shape == (2, 1)
    state = json.loads((tmp_path / "out" / "final_state.json").read_text())
    assert state["theta_star"] == [0.7]


def test_run_sequential_zero_experiments(tmp_path):
    path = make_config(tmp_path, sequential={"n_experiments": 0})
    assert cli.main(["run-sequential", "--config", str(path)]) == 0
    assert len((tmp_path / "out" / "metrics.csv").read_text().splitlines()) == 2
    assert len((tmp_path / "out" / "designs.csv").read_text().splitlines()) == 2


def test_run_sequential_draws_truth_when_unset(tmp_path):
    path = make_config(tmp_path, sequential={"n_experiments": 1, "theta_star": None})
    assert cli.main(["run-sequential", "--config", str(path)]) == 0
    state = json.loads((tmp_path / "out" / "final_state.json").read_text())
    assert len(state["theta_star"]) == 1
    assert state["theta_star"][0] != 0.7


def test_run_sequential_baseline_pair(tmp_path):
    path = make_config(tmp_path, sequential={"baseline": True})
    assert cli.main(["run-sequential", "--config", str(path)]) == 0
    out = tmp_path / "out"
    opt_designs, _ = read_design_sequence(out / "designs.csv")
    base_designs, _ = read_design_sequence(out / "designs_baseline.csv")
    assert opt_designs.shape == base_designs.shape
    assert not np.allclose(opt_designs, base_designs)
    assert (out / "metrics_baseline.csv").exists()


def test_resume_extends_a_shorter_run(tmp_path):
    first = make_config(tmp_path, "first.json", out_dir=str(tmp_path / "a"))
    assert cli.main(["run-sequential", "--config", str(first)]) == 0
    second = make_config(
        tmp_path,
        "second.json",
        out_dir=str(tmp_path / "b"),
        sequential={
            "n_experiments": 3,
            "theta_star": [0.7],
            "resume_from": str(tmp_path / "a" / "designs.csv"),
        },
    )
    assert cli.main(["run-sequential", "--config", str(second)]) == 0
    old_designs, old_outcomes = read_design_sequence(tmp_path / "a" / "designs.csv")
    new_designs, new_outcomes = read_design_sequence(tmp_path / "b" / "designs.csv")
    assert new_designs.shape == (3, 1)
    np.testing.assert_array_equal(new_designs[:2], old_designs)
    np.testing.assert_array_equal(new_outcomes[:2], old_outcomes)
    _, _, rows = split_csv(tmp_path / "b" / "metrics.csv")
    assert [int(r[0]) for r in rows] == [3]  # only the new experiment is scored


# ---------------------------------------------------- diagnose, eval-spce


def test_diagnose_oracle_cell(tmp_path):
    path = make_config(
        tmp_path,
        diagnostics={"estimators": ["oracle"], "xi_grid": [1.0], "budgets": [[64, 64]], "reps": 2},
    )
    assert cli.main(["diagnose", "--config", str(path)]) == 0
    tag, header, rows = split_csv(tmp_path / "out" / "diagnostics.csv")
    assert tag == "# codiff.diagnostics.v1"
    assert len(rows) == 1
    row = dict(zip(header, rows[0]))
    assert row["estimator"] == "oracle"
    assert float(row["bias"]) == 0.0
    assert float(row["sd"]) == 0.0


def test_eval_spce_matches_sequential_metrics(tmp_path):
    path = make_config(tmp_path)
    assert cli.main(["run-sequential", "--config", str(path)]) == 0
    out = tmp_path / "out"
    code = cli.main(
        [
            "eval-spce",
            "--config", str(path),
            "--sequence", str(out / "designs.csv"),
            "--out", str(tmp_path / "rescored"),
        ]
    )
    assert code == 0
    lived = drop_column(out / "metrics.csv", "wall_ms")
    rescored = drop_column(tmp_path / "rescored" / "metrics.csv", "wall_ms")
    assert lived == rescored


def test_eval_spce_requires_theta_star(tmp_path, capsys):
    path = make_config(tmp_path, sequential={"theta_star": None})
    seq = make_config(tmp_path, "other.json")  # any CSV-producing run
    assert cli.main(["run-sequential", "--config", str(seq)]) == 0
    code = cli.main(
        ["eval-spce", "--config", str(path), "--sequence", str(tmp_path / "out" / "designs.csv")]
    )
    assert code == 2
    assert "theta_star" in capsys.readouterr().err


def test_entry_point_runs_in_subprocess(tmp_path):
    path = make_config(tmp_path, loop={"t_outer": 2})
    proc = subprocess.run(
        [sys.executable, "-m", "codiff.cli", "run-static", "--config", str(path), "--threads", "1"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out" / "trace.csv").exists()
