import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from hypermerton import cli
from hypermerton.closed_policies import Policy

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _cfg(tmp_path, name, edit=None):
    cfg = json.loads((CONFIGS / f"{name}.json").read_text())
    if edit:
        edit(cfg)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def _run(command, cfg_path, out, *extra):
    return cli.main([command, "--config", str(cfg_path), "--out", str(out), *extra])


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_solve_writes_four_policies(tmp_path):
    out = tmp_path / "o"
    assert _run("solve", CONFIGS / "log_mixture.json", out) == 0
    names = sorted(p.name for p in out.glob("policy_*.json"))
    assert names == ["policy_constant.json", "policy_naive.json", "policy_precommitment.json",
                     "policy_sophisticated.json"]
    assert (out / "diagnostics_sophisticated.json").exists()


def test_invalid_gamma_exit_2_names_field(tmp_path, capsys):
    def edit(c):
        c["problem"]["utility"]["gamma"] = 1.0
    code = _run("solve", _cfg(tmp_path, "power_mixture", edit), tmp_path / "o")
    assert code == 2
    err = capsys.readouterr().err
    assert "utility.gamma" in err
    line = int(err.split(":")[1])
    text = _cfg(tmp_path, "power_mixture", edit).read_text().splitlines()
    assert '"gamma"' in text[line - 1]


def test_malformed_json_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "problem": {\n    "T": 1,\n  }\n}\n')
    assert _run("solve", p, tmp_path / "o") == 2
    assert ":4:" in capsys.readouterr().err


def test_unknown_solver_field_exit_2(tmp_path):
    def edit(c):
        c["solver"]["tolerance"] = 1.0
    assert _run("solve", _cfg(tmp_path, "power_mixture", edit), tmp_path / "o") == 2


def test_power_diagnostics_schema(tmp_path):
    out = tmp_path / "o"
    assert _run("solve", CONFIGS / "power_mixture.json", out) == 0
    diag = json.loads((out / "diagnostics_sophisticated.json").read_text())
    assert 1 <= len(diag["residuals"]) <= 200
    assert diag["iterations"] == len(diag["residuals"])


def test_non_convergence_exit_3_keeps_diagnostics(tmp_path):
    def edit(c):
        c["solver"]["fp_max_iters"] = 2
    out = tmp_path / "o"
    assert _run("solve", _cfg(tmp_path, "power_mixture", edit), out) == 3
    diag = json.loads((out / "diagnostics_sophisticated.json").read_text())
    assert len(diag["residuals"]) == 2
    assert (out / "policy_naive.json").exists()


def test_oracle_missing_block_exit_2(tmp_path):
    assert _run("oracle", CONFIGS / "log_mixture.json", tmp_path / "o") == 2


def test_oracle_constant_rate_table(tmp_path):
    def edit(c):
        c["oracle"] = {"steps": [32, 64]}
    out = tmp_path / "o"
    assert _run("oracle", _cfg(tmp_path, "log_constant", edit), out) == 0
    rows = _read_csv(out / "oracle_convergence.csv")
    assert [int(r["N"]) for r in rows] == [32, 64]
    assert float(rows[1]["gap"]) < 2e-2
    assert 1.6 <= float(rows[1]["ratio"]) <= 2.4
    assert rows[1]["richardson"] != ""
    assert (out / "oracle_N64.csv").exists() and (out / "oracle_diagnostics.json").exists()


def test_oracle_boundary_contacts_exit_4(tmp_path):
    def edit(c):
        c["oracle"] = {"steps": [4, 8], "span": 0.05, "n_nodes": 21}
    assert _run("oracle", _cfg(tmp_path, "log_constant", edit), tmp_path / "o") == 4


def test_compare_log_table1(tmp_path):
    out = tmp_path / "o"
    assert _run("compare", CONFIGS / "log_mixture.json", out) == 0
    rows = _read_csv(out / "table1.csv")
    by = {}
    for r in rows:
        by.setdefault(r["agent"], []).append(float(r["formula_value"]))
    gap = np.max(np.abs(np.array(by["naive"]) - np.array(by["sophisticated"])))
    assert gap < 1e-10


def test_compare_exponential_beta_flag(tmp_path):
    def edit(c):
        c["agents"] = ["constant", "precommitment", "naive"]
        c.pop("oracle")
    out = tmp_path / "o"
    assert _run("compare", _cfg(tmp_path, "exp_barro", edit), out) == 0
    report = json.loads((out / "comparison.json").read_text())
    assert report["flags"]["beta_identical"]["holds"] is True
    assert (out / "table_exponential.csv").exists()


def test_compare_empty_agents_exit_2(tmp_path):
    def edit(c):
        c["agents"] = []
    assert _run("compare", _cfg(tmp_path, "log_mixture", edit), tmp_path / "o") == 2


def test_compare_partial_exit_5(tmp_path):
    def edit(c):
        c["solver"]["fp_max_iters"] = 1
        c["agents"] = ["naive", "sophisticated"]
        c.pop("oracle")
    out = tmp_path / "o"
    assert _run("compare", _cfg(tmp_path, "power_mixture", edit), out) == 5
    assert json.loads((out / "comparison.json").read_text())["partial"] is True


def _small_sim(c):
    c["simulation"].update(n_paths=4000, n_steps=32)


def test_simulate_seed_repeat_and_override(tmp_path):
    cfg = _cfg(tmp_path, "log_constant", _small_sim)
    for name in ("a", "b"):
        assert _run("simulate", cfg, tmp_path / name) == 0
    assert (tmp_path / "a/simulation.csv").read_bytes() == (tmp_path / "b/simulation.csv").read_bytes()
    assert _run("simulate", cfg, tmp_path / "c", "--threads", "3") == 0
    assert (tmp_path / "a/simulation.csv").read_bytes() == (tmp_path / "c/simulation.csv").read_bytes()
    assert _run("simulate", cfg, tmp_path / "d", "--seed-override", "5") == 0
    assert (tmp_path / "a/simulation.csv").read_bytes() != (tmp_path / "d/simulation.csv").read_bytes()
    summary = json.loads((tmp_path / "a/simulation_summary.json").read_text())
    assert abs(summary["z_score"]) < 3


def test_solve_policy_round_trip_into_simulate(tmp_path):
    cfg = _cfg(tmp_path, "log_constant", _small_sim)
    assert _run("solve", cfg, tmp_path / "s") == 0
    pol_path = tmp_path / "s/policy_naive.json"
    built = cli.an.build_policy(*_problem_parts(cfg))
    loaded = Policy.from_json(json.loads(pol_path.read_text()))
    for t in np.linspace(0, 1, 17):
        assert abs(loaded.consumption(1.7, t) - built.consumption(1.7, t)) <= 1e-15
    assert _run("simulate", cfg, tmp_path / "x") == 0

    def use_file(c):
        _small_sim(c)
        c["simulation"]["policy_file"] = str(pol_path)
    assert _run("simulate", _cfg(tmp_path, "log_constant", use_file), tmp_path / "y") == 0
    assert (tmp_path / "x/simulation.csv").read_bytes() == (tmp_path / "y/simulation.csv").read_bytes()


def _problem_parts(cfg_path):
    cfg = cli.load_config(cfg_path)
    p = cfg.problem
    return p.utility, cli.AgentKind("naive"), p.discount, p.market, p.T, cfg.solver


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hypermerton", "oracle", "--config",
                           str(CONFIGS / "log_mixture.json"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 2
