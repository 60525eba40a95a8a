import csv
import json
import time

import numpy as np
import pytest
import yaml

from allen_cahn_clt import cli, suites
from allen_cahn_clt.config import RunConfig, parse_config
from allen_cahn_clt.errors import ConfigError, NonFiniteState
from allen_cahn_clt.propagators import Trajectory

SMALL = {
    "grid": {"d": 3, "n": 16, "L": 0.32},
    "sim": {"lam": 1.0, "eps": 0.2, "base_width": 0.4, "dt": 1e-4, "dt_max": 4e-4,
            "t_list": [0.0016, 0.0032], "s_list": [0.0, 1.0], "phi_width": 0.04},
    "ensemble": {"n_replicas": 64, "seed": 3, "chunk": 16},
}


def write_config(path, data=SMALL, **sim):
    data = json.loads(json.dumps(data))
    data["sim"].update(sim)
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_config_is_strict_and_round_trips():
    cfg = parse_config(yaml.safe_dump(SMALL))
    assert parse_config(cfg.to_yaml()) == cfg
    assert parse_config(cfg.to_yaml()).digest() == cfg.digest()
    bad = json.loads(json.dumps(SMALL))
    bad["sim"]["lamda"] = 1.0
    with pytest.raises(ConfigError):
        parse_config(yaml.safe_dump(bad))
    with pytest.raises(ConfigError):
        parse_config("- not a mapping")
    assert RunConfig().grid.n == 32


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = json.loads(json.dumps(SMALL))
    bad["grid"]["size"] = 3
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(bad))
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "size" in capsys.readouterr().err


def test_free_simulation_reports_free_heat_and_is_reproducible(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", lam=0.0)
    for out in ("a", "b"):
        assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / out)]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["verdicts"]["free-heat"]["passed"]
    assert (tmp_path / "a" / "observables.csv").read_bytes() == \
        (tmp_path / "b" / "observables.csv").read_bytes()
    traj = Trajectory.read(tmp_path / "a" / "trajectory")
    assert 0.0032 in list(traj.times)
    assert set(manifest["files"]) >= {"observables.csv", "trajectory/trajectory.json"}


def test_unresolvable_width_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", eps=0.05)
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise NonFiniteState("non-finite state at step 7", step=7, max_value=1e300)

    monkeypatch.setattr(cli, "simulate_rescaled", boom)
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_ensemble_outputs_and_worker_invariance(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", lam=[0.0, 1.0])
    suites.clear_cache()
    assert cli.main(["ensemble", "--config", cfg, "--out", str(tmp_path / "w1")]) == 0
    suites.clear_cache()
    assert cli.main(["ensemble", "--config", cfg, "--out", str(tmp_path / "w2"),
                     "--workers", "2"]) == 0
    suites.clear_cache()
    r1 = (tmp_path / "w1" / "report.json").read_text()
    assert r1 == (tmp_path / "w2" / "report.json").read_text()
    report = json.loads(r1)
    assert set(report) == {"lam=0.0,eps=0.2", "lam=1.0,eps=0.2"}
    free = report["lam=0.0,eps=0.2"]["sigma2"]["0"]
    assert abs(free["value"] - 1) < 3 * free["se"]
    with open(tmp_path / "w1" / "stats.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == cli.STAT_FIELDS
    assert {r["statistic"] for r in rows} >= {"mean", "variance", "m4", "m8"}
    assert (tmp_path / "w1" / "lam1.0_eps0.2" / "accumulator.npz").is_file()


def test_report_is_idempotent_and_requires_a_manifest(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["report", "--out", str(empty)]) == 2
    cfg = write_config(tmp_path / "c.yaml")
    out = tmp_path / "run"
    suites.clear_cache()
    assert cli.main(["ensemble", "--config", cfg, "--out", str(out)]) == 0
    suites.clear_cache()
    assert cli.main(["report", "--out", str(out)]) == 0
    first = {p: (out / p).read_bytes() for p in ("tidy.csv", "sigma_lambda.csv", "summary.txt")}
    assert cli.main(["report", "--out", str(out)]) == 0
    assert first == {p: (out / p).read_bytes() for p in first}
    sigma = first["sigma_lambda.csv"].decode().splitlines()
    assert sigma[0] == "lambda,eps,s,sigma2,se" and len(sigma) == 2


def test_verify_suites_and_exit_codes(tmp_path, capsys, monkeypatch):
    cfg = write_config(tmp_path / "c.yaml")
    assert cli.main(["verify", "--config", cfg, "--suite", "deterministic",
                     "--out", str(tmp_path / "v")]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 2
    assert json.loads((tmp_path / "v" / "verdicts.json").read_text())
    assert cli.main(["verify", "--config", cfg, "--suite", "nonsense",
                     "--out", str(tmp_path / "x")]) == 2
    assert "clt-desk" in capsys.readouterr().err

    def failing(config):
        return suites.CheckResult("always fails", False, "forced")

    monkeypatch.setitem(suites.SUITES, "failing", [failing])
    assert cli.main(["verify", "--config", cfg, "--suite", "failing",
                     "--out", str(tmp_path / "f")]) == 1


def test_single_run_meets_the_time_budget(tmp_path):
    data = {"grid": {"d": 3, "n": 64, "L": 8.0},
            "sim": {"lam": 1.0, "eps": 0.1, "base_width": 2.5, "dt": 0.01, "dt_max": None,
                    "growth": 0.0, "t_list": [1.0], "s_list": [0.0], "phi_width": 0.5}}
    path = tmp_path / "big.yaml"
    path.write_text(yaml.safe_dump(data))
    start = time.perf_counter()
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    assert time.perf_counter() - start < 60
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert np.isfinite(manifest["timing"]["wall_seconds"])
