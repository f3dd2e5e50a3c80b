import csv
import io
import json

import numpy as np
import pytest
from click.testing import CliRunner

from ot_approx.cli import SEED_ENV, main, parse_sweep
from ot_approx.errors import InputError
from ot_approx.measures import DiscreteMeasure, save_instance
from ot_approx.plan import TransportPlan


@pytest.fixture
def runner(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def report_without_timing(text):
    data = json.loads(text)
    data.pop("timing")
    return json.dumps(data, sort_keys=True)


@pytest.fixture
def two_point(tmp_path):
    path = tmp_path / "two.json"
    save_instance(path, DiscreteMeasure([[0, 0]], [1.0]), DiscreteMeasure([[3, 4]], [1.0]))
    return path


@pytest.fixture
def discrete_instance(tmp_path, runner):
    path = tmp_path / "inst.json"
    result = invoke(runner, "gen", "--kind", "discrete", "-n", 48, "--seed", 3, "-o", path)
    assert result.exit_code == 0
    return path


def test_solve_two_points(runner, two_point):
    result = invoke(runner, "solve-discrete", two_point, "--seed", 0)
    assert result.exit_code == 0
    report = json.loads(result.stdout)
    assert 5.0 <= report["result"]["cost"] <= 5.0 * 1.25 * 1.25
    assert report["config"]["seed"] == 0 and report["config"]["seed_source"] == "option"
    assert "solve_seconds" in report["timing"]


def test_reports_identical_apart_from_timing(runner, discrete_instance):
    first = invoke(runner, "solve-discrete", discrete_instance, "--seed", 11)
    second = invoke(runner, "solve-discrete", discrete_instance, "--seed", 11)
    assert first.exit_code == second.exit_code == 0
    assert report_without_timing(first.stdout) == report_without_timing(second.stdout)


def test_env_seed_overrides_option(runner, discrete_instance, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    result = invoke(runner, "solve-discrete", discrete_instance, "--seed", 1)
    config = json.loads(result.stdout)["config"]
    assert (config["seed"], config["seed_source"]) == (42, "env")


def test_missing_seed_is_random_and_logged(runner, discrete_instance):
    config = json.loads(invoke(runner, "solve-discrete", discrete_instance).stdout)["config"]
    assert config["seed_source"] == "random" and isinstance(config["seed"], int)


def test_plan_output_and_validate(runner, discrete_instance, tmp_path):
    plan_path = tmp_path / "plan.csv"
    result = invoke(runner, "solve-discrete", discrete_instance, "--seed", 2, "--plan-out", plan_path)
    assert result.exit_code == 0
    check = invoke(runner, "validate", discrete_instance, "--plan", plan_path, "--against-exact")
    assert check.exit_code == 0
    assert "marginals OK" in check.stderr
    report = json.loads(check.stdout)["result"]
    assert report["ratio"] <= 1 + 0.25


def test_tampered_plan_reports_vertex(runner, discrete_instance, tmp_path):
    plan_path = tmp_path / "plan.json"
    invoke(runner, "solve-discrete", discrete_instance, "--seed", 2, "--plan-out", plan_path)
    plan = TransportPlan.load(plan_path)
    plan.mass[0] /= 2
    plan.save(plan_path)
    check = invoke(runner, "validate", discrete_instance, "--plan", plan_path)
    assert check.exit_code == 3
    assert f"marginal violation at mu vertex {plan.src[0]}" in check.stderr
    assert f"marginal violation at nu vertex {plan.dst[0]}" in check.stderr


def test_full_validation_suite(runner, discrete_instance):
    check = invoke(runner, "validate", discrete_instance, "--seed", 5, "--against-exact")
    assert check.exit_code == 0
    checks = json.loads(check.stdout)["result"]["checks"]
    assert checks and all(checks.values())


def test_exit_codes(runner, tmp_path, two_point):
    assert invoke(runner, "solve-discrete", two_point, "--eps", 0.7).exit_code == 2
    unbalanced = tmp_path / "unb.json"
    unbalanced.write_text(json.dumps({"dim": 1, "mu": {"points": [[0]], "masses": [1]},
                                      "nu": {"points": [[1]], "masses": [2]}}))
    result = invoke(runner, "solve-discrete", unbalanced)
    assert result.exit_code == 3
    assert json.loads(result.stderr.strip().splitlines()[-1])["error"] == "InfeasibleError"
    assert invoke(runner, "solve-discrete", unbalanced, "--normalize").exit_code == 0
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert invoke(runner, "solve-discrete", broken).exit_code == 2


def test_semidiscrete_round_trip(runner, tmp_path):
    inst = tmp_path / "sd.json"
    plan = tmp_path / "sd_plan.json"
    assert invoke(runner, "gen", "--kind", "semidiscrete", "-n", 4, "--seed", 1, "-o", inst).exit_code == 0
    result = invoke(runner, "solve-semidiscrete", inst, "--seed", 1, "--plan-out", plan)
    assert result.exit_code == 0
    cost = json.loads(result.stdout)["result"]["cost"]
    assert cost > 0
    check = invoke(runner, "validate", inst, "--plan", plan)
    assert check.exit_code == 0 and "marginals OK" in check.stderr


def test_scaling1d_round_trip(runner, tmp_path):
    inst = tmp_path / "1d.json"
    plan, duals = tmp_path / "1d_plan.json", tmp_path / "duals.json"
    assert invoke(runner, "gen", "--kind", "scaling1d", "-n", 5, "--seed", 2, "-o", inst).exit_code == 0
    result = invoke(runner, "solve-scaling1d", inst, "--eps", 1e-3, "--duals-mode",
                    "--plan-out", plan, "--duals-out", duals)
    assert result.exit_code == 0
    assert set(json.loads(duals.read_text())) == {str(b) for b in range(5)}
    check = invoke(runner, "validate", inst, "--plan", plan, "--samples", 2000)
    assert check.exit_code == 0
    assert json.loads(check.stdout)["result"]["checks"]["delta_wnn"]


def test_validate_non_discrete_needs_plan(runner, tmp_path):
    inst = tmp_path / "sd.json"
    invoke(runner, "gen", "--kind", "semidiscrete", "-n", 3, "--seed", 1, "-o", inst)
    assert invoke(runner, "validate", inst).exit_code == 2


def test_bench_csv(runner, tmp_path):
    out = tmp_path / "bench.csv"
    result = invoke(runner, "bench", "--sweep", "n=2^3..2^4", "--seed", 0, "-o", out)
    assert result.exit_code == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [int(r["n"]) for r in rows] == [8, 16]
    for row in rows:
        assert float(row["time"]) > 0
        assert 1 - 1e-9 <= float(row["cost_ratio"]) <= 1.4


def test_parse_sweep():
    assert parse_sweep("n=2^4..2^6") == [16, 32, 64]
    assert parse_sweep("2^3:5") == [8, 16, 32]
    assert parse_sweep("10, 2^5") == [10, 32]
    with pytest.raises(InputError):
        parse_sweep("n=abc")
    with pytest.raises(InputError):
        parse_sweep("1")


def test_threads_option_is_recorded(runner, two_point):
    result = invoke(runner, "--threads", 1, "solve-discrete", two_point, "--seed", 0)
    assert json.loads(result.stdout)["config"]["threads"] == 1
    assert invoke(runner, "--threads", 0, "solve-discrete", two_point).exit_code == 2


def test_report_file(runner, two_point, tmp_path):
    out = tmp_path / "report.json"
    result = invoke(runner, "solve-discrete", two_point, "--seed", 0, "--report-out", out)
    assert result.exit_code == 0 and result.stdout == ""
    data = json.loads(out.read_text())
    assert data["config"]["outputs"]["report"] == str(out)
    assert np.isfinite(data["result"]["cost"])
