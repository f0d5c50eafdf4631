import json

import numpy as np
import pytest

from diamond_maps.bench.cli import main
from diamond_maps.bench.config import ConfigError, ExperimentConfig, validate
from diamond_maps.bench.metrics import DimensionError, fd_grad_check, ks_test_1d, mean_var_check, rbf_mmd, sliced_w2, w1_1d
from diamond_maps.bench.runner import csv_text, run_experiment

MINIMAL = {
    "scheduler": {"kind": "linear"},
    "mixture": {"weights": [1.0], "means": [[0.0, 0.0]], "covs": [[[1.0, 0.0], [0.0, 1.0]]]},
    "algorithm": {"name": "sample", "params": {"n_samples": 300}},
    "seed": 3,
}


def test_w1_examples(rng):
    a = rng.standard_normal(1000)
    assert w1_1d(a, a) == 0.0
    assert w1_1d(a, a + 0.7) == pytest.approx(0.7, abs=1e-12)
    big = np.random.default_rng(0)
    assert w1_1d(big.standard_normal(100_000), big.standard_normal(100_000) + 1) == pytest.approx(1.0, abs=0.02)
    assert w1_1d(a, a[:700]) >= 0.0
    with pytest.raises(DimensionError):
        w1_1d(rng.standard_normal((10, 2)), rng.standard_normal((10, 2)))


def test_w1_unequal_sizes_matches_quantiles():
    a = np.array([0.0, 1.0])
    b = np.array([0.0, 0.5, 1.0])
    # quantile functions differ on [1/3, 1/2] by 0.5 and on [1/2, 2/3] by 0.5
    assert w1_1d(a, b) == pytest.approx(0.5 / 3, abs=1e-12)


def test_sliced_w2_properties(rng):
    a = rng.standard_normal((4000, 2))
    b = rng.standard_normal((4000, 2))
    assert sliced_w2(a, a) == 0.0
    assert sliced_w2(a, b) == pytest.approx(sliced_w2(b, a), abs=1e-12)
    assert sliced_w2(a, b) == sliced_w2(a[rng.permutation(4000)], b)
    assert sliced_w2(a, b, rng_seed=5) == sliced_w2(a, b, rng_seed=5)
    big = np.random.default_rng(1)
    x = big.standard_normal((20_000, 2))
    y = big.standard_normal((20_000, 2)) + np.array([1.0, 1.0])
    # squared shift |v|^2 / d = 1; direction sampling adds ~0.008 sd at 2048
    assert sliced_w2(x, y, 2048) == pytest.approx(np.sqrt(2.0 / 2), abs=0.03)
    with pytest.raises(DimensionError):
        sliced_w2(a, rng.standard_normal((10, 3)))
    with pytest.raises(DimensionError):
        sliced_w2(a[:1], b)


def test_rbf_mmd(rng):
    a = rng.standard_normal((500, 2))
    b = rng.standard_normal((500, 2))
    est, se = rbf_mmd(a, b, 1.0, return_stderr=True)
    assert abs(est) <= 3 * se
    assert rbf_mmd(a, b + 2.0, 1.0) > 10 * se
    with pytest.raises(ValueError):
        rbf_mmd(a, b, 0.0)


def test_ks_and_mean_var(rng):
    a = rng.standard_normal(5000)
    assert ks_test_1d(a, rng.standard_normal(5000)) > 1e-3
    assert ks_test_1d(a, rng.standard_normal(5000) + 0.5) < 1e-6
    zm, zv = mean_var_check(rng.standard_normal((20_000, 2)), rng.standard_normal((20_000, 2)))
    assert np.all(np.abs(zm) < 5) and np.all(np.abs(zv) < 5)


def test_fd_grad_check():
    assert fd_grad_check(lambda x: (float(x @ x), 2 * x), np.array([1.0, -2.0])) <= 1e-8
    assert fd_grad_check(lambda x: float(x @ x), np.array([1.0, -2.0]), grad=np.array([0.0, 0.0])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        fd_grad_check(lambda x: 1.0, np.zeros(2))


def test_schema_rejects_unknown_keys():
    validate(MINIMAL)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**MINIMAL, "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**MINIMAL, "algorithm": {"name": "sample", "params": {"what": 1}}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**MINIMAL, "scheduler": {"kind": "cosine"}})


def test_csv_header():
    text = csv_text(np.array([[1.0, 2.0], [3.0, 4.5]]))
    assert text.splitlines()[0] == "x0,x1"
    assert text.splitlines()[2] == "3,4.5"


def test_minimal_run_writes_four_files(tmp_path):
    out = run_experiment(MINIMAL, tmp_path / "run")
    assert sorted(p.name for p in out.iterdir()) == ["config-echo.json", "metrics.jsonl", "report.svg", "samples.csv"]
    rows = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert rows[0]["metric"] == "sliced_w2_vs_data"
    assert (out / "samples.csv").read_text().splitlines()[0] == "x0,x1"
    assert (out / "report.svg").read_text().lstrip().startswith("<?xml")


def test_determinism(tmp_path):
    a = run_experiment(MINIMAL, tmp_path / "a")
    b = run_experiment(MINIMAL, tmp_path / "b")
    assert (a / "samples.csv").read_bytes() == (b / "samples.csv").read_bytes()
    assert (a / "report.svg").read_bytes() == (b / "report.svg").read_bytes()


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(MINIMAL))
    assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "ok")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**MINIMAL, "extra": True}))
    assert main(["sample", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["sample", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["sample", "--config", str(cfg), "--t-clamp", "0.5", "--out", str(tmp_path / "y")]) == 2
    improper = {**MINIMAL, "reward": {"kind": "quadratic", "A": [[5.0, 0.0], [0.0, 5.0]], "b": [0.0, 0.0]}}
    improper["algorithm"] = {"name": "value", "params": {"estimator": "exact"}}
    bad.write_text(json.dumps(improper))
    assert main(["value", "--config", str(bad), "--out", str(tmp_path / "z")]) == 3


def test_report_fig2(tmp_path):
    assert main(["report", "fig2", "--out", str(tmp_path / "fig")]) == 0
    out = tmp_path / "fig"
    assert (out / "report.svg").exists()
    rows = (out / "rstar_surface.csv").read_text().splitlines()
    assert len(rows) > 2


@pytest.mark.parametrize("command", ["oracle", "posterior", "ddpm-step", "value", "guide", "smc", "search"])
def test_subcommands_smoke(tmp_path, command):
    cfg = dict(MINIMAL)
    cfg["algorithm"] = {"name": command, "params": {"n_samples": 200, "particles": 4, "M": 32, "n_steps": 4, "inner_steps": 4}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main([command, "--config", str(path), "--out", str(tmp_path / command)]) == 0
    assert (tmp_path / command / "metrics.jsonl").exists()
