import subprocess
import sys

import numpy as np
import pytest
import yaml

from rrmdp.cli import main
from rrmdp.environments import build_simulated_linear_mdp, uniform_behavior_policy
from rrmdp.experiments import (ConfigError, cached_dataset, load_config, parse_config, read_rows, run_dualcheck,
                               run_experiment)
from rrmdp.mdp_core import OfflineDataset, collect_dataset, read_keyvalue


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


SIM = {"builder": "simulated_linear_mdp", "xi_norm": 0.3, "delta_env": 0.3, "H": 3}


def curve_config(out, workers=1):
    return {"kind": "robustness-curve", "env": SIM,
            "algorithms": [{"name": "PEVI", "beta": 1.0, "gamma": 0.1},
                           {"name": "R2PVI", "divergence": "TV", "lambda": 0.1, "beta": 1.0, "gamma": 0.1}],
            "K": [50], "seeds": [0, 1], "perturbations": [0.0, 0.5, 0.9], "output_dir": str(out), "workers": workers}


def test_collect_solve_eval_flow(tmp_path, capsys):
    data = tmp_path / "data.csv"
    assert main(["collect", "--builder", "simulated_linear_mdp", "--K", "40", "--seed", "3", "--out", str(data)]) == 0
    env_path = tmp_path / "data.env"
    assert env_path.exists() and data.exists()
    assert OfflineDataset.from_csv(data).K == 40
    rc = main(["solve", "--env", str(env_path), "--data", str(data), "--algo", "R2PVI", "--divergence", "Chi2",
               "--lambda", "1.0", "--out-dir", str(tmp_path), "--prefix", "chi2"])
    assert rc == 0
    head = (tmp_path / "chi2_q.csv").read_text().splitlines()[0]
    assert head == "h,s,a,q_hat"
    out_csv = tmp_path / "eval.csv"
    rc = main(["eval", "--env", str(env_path), "--q-table", str(tmp_path / "chi2_q.csv"), "--perturbation", "0.5",
               "--out", str(out_csv)])
    assert rc == 0
    rows = read_rows(out_csv)
    assert rows[0]["metric"] == "return" and rows[0]["perturbation"] == "0.5"
    assert main(["eval", "--env", str(env_path), "--q-table", str(tmp_path / "chi2_q.csv"), "--mode", "mc",
                 "--n-episodes", "200"]) == 0
    assert main(["eval", "--env", str(env_path), "--q-table", str(tmp_path / "chi2_q.csv"), "--robust", "KL",
                 "--robust-lambda", "0.5"]) == 0
    assert "robust_value_KL" in capsys.readouterr().out


def test_run_writes_results_and_manifest(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", curve_config(tmp_path / "out"))
    assert main(["run", str(cfg)]) == 0
    rows = read_rows(tmp_path / "out" / "results.csv")
    assert len(rows) == 2 * 2 * 3
    manifest = read_keyvalue(tmp_path / "out" / "manifest.txt")
    assert manifest["kind"] == "robustness-curve" and int(manifest["rows"]) == 12
    assert len(manifest["config_hash"]) == 64
    assert sum(k.startswith("cell.") for k in manifest) == 12


def test_worker_count_does_not_change_results(tmp_path):
    a = run_experiment(parse_config(curve_config(tmp_path / "a", workers=1)))
    b = run_experiment(parse_config(curve_config(tmp_path / "b", workers=2)))
    assert [r["value"] for r in a] == [r["value"] for r in b]


def test_cache_matches_fresh_collection(tmp_path):
    env = build_simulated_linear_mdp()
    first = cached_dataset(env, "uniform", 30, 5, tmp_path)
    again = cached_dataset(env, "uniform", 30, 5, tmp_path)
    fresh = collect_dataset(env, uniform_behavior_policy(env), 30, 5)
    assert first.digest() == again.digest() == fresh.digest()
    # a corrupted cache file is replaced instead of trusted
    for f in tmp_path.glob("*.csv"):
        f.write_text("garbage\n")
    assert cached_dataset(env, "uniform", 30, 5, tmp_path).digest() == fresh.digest()


def test_bench_rows(tmp_path):
    cfg = {"kind": "timing-vs-N", "env": {"builder": "american_put", "d": 5, "H": 5},
           "algorithms": [{"name": "PEVI", "beta": 0.1, "gamma": 1.0}], "K": [20, 40], "seeds": [0],
           "repeats": 3, "output_dir": str(tmp_path / "t")}
    assert main(["bench", str(write_yaml(tmp_path / "t.yaml", cfg))]) == 0
    rows = read_rows(tmp_path / "t" / "results.csv")
    assert [r["rep"] for r in rows] == ["0", "1", "2", "mean"] * 2
    assert {r["d"] for r in rows} == {"5"}


def test_hardness_command(tmp_path):
    cfg = {"kind": "hardness", "env": {"builder": "hard_instance", "H": 2, "d": 2},
           "algorithms": [{"name": "R2PVI", "divergence": "TV", "lambda": 1.0, "beta": 1.0, "gamma": 1.0}],
           "K": [200], "seeds": [0, 1], "output_dir": str(tmp_path / "h")}
    assert main(["hardness", str(write_yaml(tmp_path / "h.yaml", cfg))]) == 0
    rows = read_rows(tmp_path / "h" / "results.csv")
    assert len(rows) == 2 and all(float(r["value"]) >= -1e-9 for r in rows)


def test_hardness_rejects_small_K_naming_cell(tmp_path):
    cfg = {"kind": "hardness", "env": {"builder": "hard_instance", "H": 3, "d": 4},
           "algorithms": [{"name": "R2PVI", "divergence": "TV", "lambda": 1.0}], "K": [10], "seeds": [0]}
    with pytest.raises(ConfigError, match=r"cell \(algo=R2PVI-TV\(lambda=1\), K=10\)"):
        parse_config(cfg)
    assert main(["hardness", str(write_yaml(tmp_path / "bad.yaml", cfg))]) == 2


@pytest.mark.parametrize("mutate", [
    lambda c: c.update(kind="nope"),
    lambda c: c.update(algorithms=[]),
    lambda c: c.update(seeds=[]),
    lambda c: c["algorithms"].append({"name": "R2PVI", "divergence": "Hellinger", "lambda": 1.0}),
    lambda c: c["algorithms"].append({"name": "DRPVI", "rho": 1.5}),
    lambda c: c.update(perturbations=[1.2]),
])
def test_bad_configs_exit_2(tmp_path, mutate):
    cfg = curve_config(tmp_path / "x")
    mutate(cfg)
    assert main(["run", str(write_yaml(tmp_path / "bad.yaml", cfg))]) == 2


def test_unparseable_config(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("kind: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)
    assert main(["run", str(path)]) == 2


def test_argument_errors_exit_2():
    assert main(["solve", "--algo", "PEVI"]) == 2
    assert main(["collect", "--K", "5", "--out", "x.csv"]) == 2


def test_out_of_range_builder_params_exit_2(tmp_path):
    bad = tmp_path / "bad.env"
    bad.write_text("builder=simulated_linear_mdp\nxi=0.5,0.5,0.5,0.5\n")
    assert main(["collect", "--env", str(bad), "--K", "5", "--out", str(tmp_path / "d.csv")]) == 2


def test_dualcheck_command(capsys):
    assert main(["dualcheck", "--trials", "20", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
    assert main(["dualcheck", "--trials", "3", "--corrupt-lambda"]) == 1
    assert "rejected input" in capsys.readouterr().out


def test_dualcheck_single_constant_instance(monkeypatch):
    from rrmdp import duals
    monkeypatch.setattr(duals, "random_instances",
                        lambda trials, seed: [(np.array([0.3, 0.7]), np.array([1.0, 1.0]), 0.5)])
    report = run_dualcheck(1, 0)
    assert report.passed and max(report.oracle_error.values()) <= 1e-12


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "rrmdp.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("collect", "solve", "eval", "run", "bench", "dualcheck", "hardness"):
        assert cmd in out.stdout
