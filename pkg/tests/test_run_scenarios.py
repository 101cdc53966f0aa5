import json
import os

import pytest

from lab_utils import ConfigValidationError
from run_scenarios import SCENARIOS, main, validate_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def shipped(name):
    return os.path.join(ROOT, "scenarios", name)


def read_summary(out_dir):
    with open(os.path.join(out_dir, "summary.json"), encoding="utf-8") as fh:
        return json.load(fh)


# -----------------------
# Config validation
# -----------------------
def test_invalid_config_lists_every_error_and_writes_nothing(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = {"scenario": "kuramoto_locked", "seed": -3, "colour": "red",
           "params": {"alpha": 3.0, "horizon": -1.0, "bogus": 1}}
    code = main(["run", write_config(tmp_path, cfg), "--out", str(out)])
    assert code == 1
    errors = [line for line in capsys.readouterr().out.splitlines() if line.startswith("❌")]
    assert len(errors) >= 5, errors
    assert not out.exists()


def test_unknown_scenario_is_reported():
    with pytest.raises(ConfigValidationError) as info:
        validate_config({"scenario": "nope"}, "run")
    assert any("scenario must be one of" in e for e in info.value.errors)


def test_grid_belongs_to_sweeps_only():
    cfg = {"scenario": "kuramoto_locked", "grid": {"alpha": [0.5]}}
    with pytest.raises(ConfigValidationError) as info:
        validate_config(cfg, "run")
    assert info.value.errors == ["grid is only valid with the sweep command"]
    with pytest.raises(ConfigValidationError) as info:
        validate_config({"scenario": "kuramoto_locked"}, "sweep")
    assert info.value.errors == ["sweep needs a grid"]


def test_envelope_scenario_cannot_sweep():
    with pytest.raises(ConfigValidationError) as info:
        validate_config({"scenario": "envelope", "grid": {"gain": [0.1]}}, "sweep")
    assert any("does not support sweep" in e for e in info.value.errors)


def test_defaults_and_overrides_resolve():
    plan = validate_config({"scenario": "kuramoto_locked", "seed": 3}, "run", seed=11, out="somewhere")
    assert plan["seed"] == 11 and plan["output_dir"] == "somewhere"
    assert plan["params"]["alpha"] == 0.9 and plan["params"]["A2"] is None
    assert plan["integrator"].scheme == "rk4_fixed" and plan["integrator"].step == 0.01


@pytest.mark.parametrize("name", sorted(f for f in os.listdir(os.path.join(ROOT, "scenarios")) if f.endswith(".json")))
def test_shipped_configs_validate(name):
    with open(shipped(name), encoding="utf-8") as fh:
        cfg = json.load(fh)
    validate_config(cfg, "sweep" if "grid" in cfg else "run")


def test_list_scenarios_names_every_id(capsys):
    assert main(["list-scenarios"]) == 0
    printed = capsys.readouterr().out
    for sid in SCENARIOS:
        assert sid in printed


# -----------------------
# Runs
# -----------------------
def test_envelope_run_writes_artifacts_deterministically(tmp_path):
    cfg = write_config(tmp_path, {"scenario": "envelope", "seed": 7})
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["run", cfg, "--out", a]) == 0
    assert main(["run", cfg, "--out", b]) == 0
    for name in ("summary.json", "timing.json", "plot_results.py",
                 "trajectories_vanishing.csv", "trajectories_constant.csv"):
        assert os.path.exists(os.path.join(a, name)), name
    summary = read_summary(a)
    assert {c["case"]: c["verdict"] for c in summary["cases"]} == {"vanishing": "pass", "constant": "pass"}
    assert "output_dir" not in summary["config"]
    with open(os.path.join(a, "summary.json"), "rb") as fa, open(os.path.join(b, "summary.json"), "rb") as fb:
        assert fa.read() == fb.read()


def test_locked_star_run_is_stable(tmp_path):
    cfg = write_config(tmp_path, {"scenario": "kuramoto_locked", "params": {"alpha": 0.9, "mu0": 0.001, "horizon": 60.0}})
    out = str(tmp_path / "locked")
    assert main(["run", cfg, "--out", out, "--seed", "5"]) == 0
    summary = read_summary(out)
    case = summary["cases"][0]
    assert summary["seed"] == 5
    assert case["verdict"] == "stable" and case["eig_verdict"] == "stable"
    assert case["lambda_hat"] == pytest.approx(0.2694, rel=1e-2)
    assert os.path.exists(os.path.join(out, "observables_star.csv"))


def test_single_cell_sweep(tmp_path):
    cfg = write_config(tmp_path, {"scenario": "kuramoto_locked", "params": {"mu0": 0.001, "horizon": 60.0},
                                  "grid": {"alpha": [0.9], "u": [0.0]}})
    out = str(tmp_path / "sweep")
    assert main(["sweep", cfg, "--out", out]) == 0
    summary = read_summary(out)
    assert len(summary["rows"]) == 1
    row = summary["rows"][0]
    assert row["alpha"] == 0.9 and row["verdict"] == "stable" and row["eig_verdict"] == "stable"
    for name in ("sweep.csv", "sweep.md", os.path.join("cells", "cell_00000.json"), "plot_results.py"):
        assert os.path.exists(os.path.join(out, name)), name


@pytest.mark.slow
def test_alpha_sweep_flips_across_pi_over_three(tmp_path):
    out = str(tmp_path / "alpha")
    assert main(["run", shipped("alpha_sweep.json"), "--out", out]) == 0
    agg = read_summary(out)["aggregate"]
    assert agg["eigenvalue_brackets_threshold"], agg
    assert agg["simulation_brackets_threshold"], agg


@pytest.mark.slow
def test_epsilon_sweep_rate_grows_linearly(tmp_path):
    out = str(tmp_path / "eps")
    assert main(["sweep", shipped("sweep_epsilon.json"), "--out", out]) == 0
    trend = read_summary(out)["lambda_trend"]
    assert trend["slope"] > 0 and trend["r_squared"] >= 0.95, trend


@pytest.mark.slow
def test_example1_scenario_is_stable(tmp_path):
    out = str(tmp_path / "example1")
    assert main(["run", shipped("example1.json"), "--out", out]) == 0
    case = read_summary(out)["cases"][0]
    assert case["verdict"] == "stable" and case["lambda_hat"] > 0


def test_sweep_cells_get_the_cross_field_checks():
    cfg = {"scenario": "certificate", "grid": {"v_min": [-1.0, 4.0]}}
    with pytest.raises(ConfigValidationError) as info:
        validate_config(cfg, "sweep")
    assert len(info.value.errors) == 1
    assert "v_min must be < params.v_max" in info.value.errors[0]
    assert "4.0" in info.value.errors[0]
    validate_config({"scenario": "certificate", "grid": {"v_min": [-1.0, 0.0]}}, "sweep")


def test_cell_schema_sweeps_check_each_cell():
    cfg = {"scenario": "u_sweep", "params": {"A2": -1.0}, "grid": {"u": [4.0]}}
    with pytest.raises(ConfigValidationError) as info:
        validate_config(cfg, "sweep")
    assert any("A2 must be > 0" in e for e in info.value.errors), info.value.errors
