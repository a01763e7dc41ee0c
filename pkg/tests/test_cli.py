import json
import subprocess
import sys

import numpy as np
import pytest

from placebo.cli import default_designs, main
from placebo.data import Dataset, write_csv
from placebo.sim import ScenarioConfig, generate


@pytest.fixture(scope="module")
def scenario_csv(tmp_path_factory):
    d, _ = generate(ScenarioConfig.scenario("I", n=1000, seed=21))
    path = tmp_path_factory.mktemp("cli") / "scen1.csv"
    write_csv(d, path)
    return str(path)


@pytest.fixture(scope="module")
def positive_csv(tmp_path_factory):
    d, _ = generate(ScenarioConfig.scenario("I", n=600, seed=22))
    d = d.with_outcome(d.y - d.y.min())
    path = tmp_path_factory.mktemp("cli") / "pos.csv"
    write_csv(d, path)
    return str(path)


DR_DESIGNS = ["--mu", "1 + X1 + X2 + X3 + X2:X3 + S + A + S:A + S:X3 + S:X2:X3",
              "--pi-s", "1 + X1 + X2 + X3 + X2:X3", "--pi-a", "1 + X1 + X2 + X3 + X2:X3 + S"]


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_estimate_round_trip(capsys, scenario_csv):
    code, out, _ = run(capsys, ["estimate", "--data", scenario_csv, "--estimator", "dr", "--se", "plugin",
                                *DR_DESIGNS])
    assert code == 0
    payload = json.loads(out)
    res = payload["result"]
    assert abs(res["estimate"] - 1.0) <= 3 * res["se"]
    assert res["method"] == "plugin" and res["n"] == 1000
    assert payload["config"]["mu"] == DR_DESIGNS[1]
    assert "threads" not in payload["config"]


@pytest.mark.parametrize("se", ["sandwich", "bootstrap"])
def test_estimate_other_methods(capsys, scenario_csv, se):
    code, out, _ = run(capsys, ["estimate", "--data", scenario_csv, "--estimator", "reg", "--se", se,
                                "--boot-reps", "50"])
    assert code == 0
    assert json.loads(out)["result"]["method"] == se


def test_misspelled_covariate_exits_2(capsys, scenario_csv):
    code, _, err = run(capsys, ["estimate", "--data", scenario_csv, "--estimator", "reg",
                                "--mu", "1 + X1 + Xq + S + A + S:A"])
    assert code == 2 and "Xq" in err
    code, _, err = run(capsys, ["estimate", "--data", scenario_csv, "--covariates", "X1,X4"])
    assert code == 2 and "X4" in err


def test_exit_codes_for_fit_and_inference(capsys, tmp_path):
    x = np.linspace(-2, 2, 40).reshape(-1, 1)
    s = np.tile([1.0, 0.0], 20)
    a = (x[:, 0] > 0).astype(float)
    path = tmp_path / "sep.csv"
    write_csv(Dataset(np.arange(40.0), a, s, x, ("X1",)), path)
    code, _, err = run(capsys, ["estimate", "--data", str(path), "--estimator", "ipw", "--se", "sandwich"])
    assert code == 3 and "fit" in err
    code, _, err = run(capsys, ["estimate", "--data", str(path), "--estimator", "reg", "--se", "plugin"])
    assert code == 4 and "inference" in err


def test_output_is_byte_identical(scenario_csv, tmp_path):
    base = [sys.executable, "-m", "placebo", "estimate", "--data", scenario_csv, "--estimator", "dr",
            "--se", "bootstrap", "--boot-reps", "60", "--seed", "3"]
    outs = [subprocess.run(base + ["--threads", t], capture_output=True, check=True).stdout for t in ("1", "1", "3")]
    assert outs[0] == outs[1] == outs[2]


def test_config_file_composition(capsys, scenario_csv, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"data = {scenario_csv}\nestimator = reg\nse = sandwich\nseed = 9  # comment\n")
    code, out, _ = run(capsys, ["estimate", "--config", str(cfg)])
    conf = json.loads(out)["config"]
    assert code == 0 and conf["estimator"] == "reg" and conf["seed"] == 9 and conf["se"] == "sandwich"
    code, out, _ = run(capsys, ["estimate", "--config", str(cfg), "--seed", "4", "--se", "plugin",
                                "--estimator", "dr"])
    conf = json.loads(out)["config"]
    assert code == 0 and conf["seed"] == 4 and conf["estimator"] == "dr" and conf["data"] == scenario_csv
    cfg.write_text("bogus = 1\n")
    code, _, err = run(capsys, ["estimate", "--config", str(cfg)])
    assert code == 2 and "bogus" in err


def test_environment_seed(capsys, scenario_csv, monkeypatch):
    monkeypatch.setenv("PLACEBO_SEED", "17")
    code, out, _ = run(capsys, ["estimate", "--data", scenario_csv, "--estimator", "reg", "--se", "sandwich"])
    assert json.loads(out)["config"]["seed"] == 17
    code, out, _ = run(capsys, ["estimate", "--data", scenario_csv, "--estimator", "reg", "--se", "sandwich",
                                "--seed", "2"])
    assert json.loads(out)["config"]["seed"] == 2


def test_help_lists_flags():
    for cmd, flags in {
        "estimate": ["--data", "--estimator", "--mu", "--pi-s", "--pi-a", "--se", "--seed", "--threads",
                     "--boot-reps", "--alpha", "--config", "--output", "--weights", "--covariates"],
        "sensitivity": ["--model", "--gamma", "--lambda", "--gamma-l", "--gamma-u", "--lambda-l", "--lambda-u",
                        "--gamma-grid", "--lambda-grid", "--shift-outcome", "--override", "--seed", "--threads"],
        "simulate": ["--scenario", "--reps", "--n", "--boot-reps", "--trim", "--table", "--raw", "--seed",
                     "--threads", "--output"],
    }.items():
        out = subprocess.run([sys.executable, "-m", "placebo", cmd, "--help"], capture_output=True, text=True,
                             check=True).stdout
        for flag in flags:
            assert flag in out, (cmd, flag)


def test_marginal_degenerate(capsys, positive_csv):
    code, out, _ = run(capsys, ["sensitivity", "--data", positive_csv, "--estimator", "reg", "--model",
                                "marginal", "--gamma", "1", "--lambda", "0", "--boot-reps", "50"])
    assert code == 0
    res = json.loads(out)["result"]
    assert res["theta_l"] == res["theta_u"] == res["diagnostics"]["estimate"]
    assert res["params"] == {"gamma": 1.0, "lambda": 0.0}


def test_marginal_grid_csv(capsys, positive_csv, tmp_path):
    dest = tmp_path / "grid.csv"
    code, out, _ = run(capsys, ["sensitivity", "--data", positive_csv, "--estimator", "reg",
                                "--gamma-grid", "1,1.01,1.05", "--boot-reps", "50", "--output", str(dest)])
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "gamma,lambda,theta_l,theta_u,ci_lo,ci_hi"
    rows = [list(map(float, line.split(","))) for line in lines[1:]]
    assert len(rows) == 3
    for narrow, wide in zip(rows, rows[1:]):
        assert wide[2] <= narrow[2] and wide[3] >= narrow[3]
        assert wide[4] <= narrow[4] and wide[5] >= narrow[5]
    assert dest.read_text() == out


def test_marginal_negative_outcome(capsys, scenario_csv):
    code, _, err = run(capsys, ["sensitivity", "--data", scenario_csv, "--estimator", "reg",
                                "--gamma", "1.1", "--boot-reps", "50"])
    assert code == 2 and "marginal model requires nonnegative outcomes" in err
    code, _, err = run(capsys, ["sensitivity", "--data", scenario_csv, "--estimator", "reg",
                                "--gamma", "1.1", "--boot-reps", "50", "--shift-outcome", "20"])
    assert code == 0 and "warning" in err


def test_linear_zero_box_matches_bootstrap(capsys, scenario_csv):
    common = ["--data", scenario_csv, "--estimator", "reg", "--boot-reps", "80", "--seed", "5"]
    _, out, _ = run(capsys, ["estimate", "--se", "bootstrap", *common])
    boot = json.loads(out)["result"]
    code, out, _ = run(capsys, ["sensitivity", "--model", "linear", *common])
    sens = json.loads(out)["result"]
    assert code == 0 and sens["ci"] == boot["ci"]
    code, out, _ = run(capsys, ["sensitivity", "--model", "linear", "--gamma-l", "-0.1", "--gamma-u", "0.1",
                                "--override", "lambda0=0,0.2", *common])
    wide = json.loads(out)["result"]
    assert wide["ci"][0] <= sens["ci"][0] and wide["ci"][1] >= sens["ci"][1]
    assert wide["params"]["overrides"] == {"lambda0": [0.0, 0.2]}


def test_simulate_all_scenarios(capsys, tmp_path):
    csv_path, table, raw = tmp_path / "r.csv", tmp_path / "t.txt", tmp_path / "raw.csv"
    argv = ["simulate", "--scenario", "all", "--reps", "2", "--n", "300", "--boot-reps", "10", "--seed", "1",
            "--output", str(csv_path), "--table", str(table), "--raw", str(raw)]
    code, out, _ = run(capsys, argv)
    assert code in (0, 5)
    assert len(json.loads(out)["rows"]) == 72
    assert len(csv_path.read_text().strip().splitlines()) == 73
    assert len(raw.read_text().strip().splitlines()) == 1 + 72 * 2
    assert "Scenario VIII" in table.read_text()
    first = csv_path.read_bytes()
    run(capsys, argv[:-6] + ["--threads", "2", "--output", str(csv_path)])
    assert csv_path.read_bytes() == first


def test_unknown_scenario(capsys):
    code, _, err = run(capsys, ["simulate", "--scenario", "IX", "--reps", "1"])
    assert code == 2 and "IX" in err


def test_default_designs():
    d = default_designs("dr", ("X1", "X2"))
    assert d["mu"] == "1 + X1 + X2 + S + A + S:A + S:X1 + S:X2"
    assert d["pi_a"] == "1 + X1 + X2 + S"
    assert default_designs("reg_naive", ("X1",))["mu"] == "1 + X1 + A"
