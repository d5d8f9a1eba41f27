import csv
import hashlib
import json

import numpy as np
import pytest

from ocformer.cli import main
from ocformer.config import RunConfig, load_config
from ocformer.errors import ConfigError
from ocformer.experiments import target_map

SMALL = {
    "quantization": {"n": 5, "ell": 8},
    "actions": {"size": 3, "seed": 2},
    "dataset": {"K_train": 4, "K_test": 3, "seed": 1},
    "sweep": {"levels": [2, 3]},
    "robustness": {"sizes": [2, 3], "seeds": [0], "truth_size": 5, "net_size": 2},
}


@pytest.fixture
def config_path(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_config_defaults_and_validation(tmp_path):
    rc = RunConfig()
    assert rc.system.lam == 32.0 and rc.quantization.ell == 20
    assert rc.sweep.levels == tuple(range(10, 101, 10))
    assert RunConfig.from_dict(rc.to_dict()) == rc
    for bad in (
        {"nope": 1},
        {"system": {"N": 4, "colour": "red"}},
        {"system": {"lam": 10}},
        {"quantization": {"n": 0}},
        {"sweep": {"levels": [3, 2]}},
        {"actions": {"mode": "grid"}},
        {"budget": 0},
    ):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_generate_data_is_reproducible_and_hashed(tmp_path, config_path):
    assert run("generate-data", "--config", config_path, "--out-dir", tmp_path / "a") == 0
    assert run("generate-data", "--config", config_path, "--out-dir", tmp_path / "b") == 0
    a, b = tmp_path / "a" / "dataset.json", tmp_path / "b" / "dataset.json"
    assert a.read_bytes() == b.read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["files"]["dataset.json"] == sha(a)
    assert manifest["seed"] == 1 and manifest["config"]["quantization"]["ell"] == 8
    sample = json.loads(a.read_text())["train"][2]
    assert np.array_equal(target_map(sample["inputs"]), np.array(sample["labels"]))


@pytest.fixture
def trained(tmp_path, config_path):
    run("generate-data", "--config", config_path, "--out-dir", tmp_path / "d")
    ds = tmp_path / "d" / "dataset.json"
    assert run("train", "--config", config_path, "--dataset", ds, "--out-dir", tmp_path / "t") == 0
    return tmp_path, ds


def test_train_is_deterministic(trained, config_path):
    tmp, ds = trained
    assert run("train", "--config", config_path, "--dataset", ds, "--out-dir", tmp / "t2") == 0
    assert (tmp / "t" / "policy.json").read_bytes() == (tmp / "t2" / "policy.json").read_bytes()


def test_evaluate_reproduces_report_and_lift(trained, capsys):
    tmp, ds = trained
    report = json.loads((tmp / "t" / "report.json").read_text())
    policy = tmp / "t" / "policy.json"
    capsys.readouterr()
    assert run("evaluate", "--policy", policy, "--dataset", ds, "--model", "quantized", "--split", "train") == 0
    assert json.loads(capsys.readouterr().out)["lifted_cost"] == report["value"]
    assert run("evaluate", "--policy", policy, "--dataset", ds, "--out-dir", tmp / "e") == 0
    m = json.loads((tmp / "e" / "metrics.json").read_text())
    assert abs(m["lifted_cost"] - m["particle_loss"]) < 1e-9


def test_evaluate_rejects_mismatched_dimensions(trained, tmp_path):
    tmp, _ = trained
    other = tmp / "other.json"
    other.write_text(json.dumps({"system": {"N": 3}, "dataset": {"K_train": 2, "K_test": 1}}))
    run("generate-data", "--config", other, "--out-dir", tmp / "d3")
    code = run("evaluate", "--policy", tmp / "t" / "policy.json", "--dataset", tmp / "d3" / "dataset.json")
    assert code == 2


def test_exit_codes(tmp_path, config_path, trained):
    tmp, ds = trained
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"mystery": 1}))
    assert run("train", "--config", bad, "--dataset", ds) == 2
    assert run("train", "--config", config_path, "--dataset", tmp_path / "missing.json") == 4
    assert run("train", "--config", config_path, "--dataset", ds, "--budget", 1, "--out-dir", tmp / "x") == 3
    garbage = tmp_path / "garbage.json"
    garbage.write_text("[1, 2]")
    assert run("train", "--config", config_path, "--dataset", garbage) == 2


def test_sweep_csv(tmp_path, config_path):
    assert run("sweep", "--config", config_path, "--levels", "1,2,3", "--out-dir", tmp_path / "s") == 0
    rows = list(csv.reader((tmp_path / "s" / "sweep.csv").open()))
    assert rows[0] == ["level", "train_error", "test_error", "wall_seconds", "state_count"]
    train = [float(r[1]) for r in rows[1:]]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    assert all(b <= a for a, b in zip(train, train[1:]))
    assert run("sweep", "--config", config_path, "--levels", "3,x") == 2


def test_robustness_csv_is_deterministic(tmp_path, config_path):
    assert run("robustness", "--config", config_path, "--out-dir", tmp_path / "r1") == 0
    assert run("robustness", "--config", config_path, "--out-dir", tmp_path / "r2") == 0
    a = (tmp_path / "r1" / "robustness.csv").read_text()
    assert a == (tmp_path / "r2" / "robustness.csv").read_text()
    assert a.splitlines()[0] == "K_r,seed,value,gap,action_distance"


def test_quantizer_bench_csv(tmp_path):
    assert run("quantizer-bench", "--sizes", "3,5", "--levels", "2,4", "--samples", 10, "--out-dir", tmp_path / "q") == 0
    rows = list(csv.DictReader((tmp_path / "q" / "quantizer_bench.csv").open()))
    assert len(rows) == 4
    assert all(float(r["max_error"]) <= float(r["bound"]) for r in rows)
