import json
import math
import os

import numpy as np
import pytest

import normbench as nb


def test_decomposition_identity():
    rng = np.random.default_rng(0)
    x = rng.uniform(-5, 5, size=(6, 4))
    mu_b, mu = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4)
    sigma_b, sigma = rng.uniform(0.1, 3, 4), rng.uniform(0.1, 3, 4)
    assert nb.decomposition_check(x, mu_b, sigma_b, mu, sigma) < 1e-12


def test_singular_values_match_numpy():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, 8))
    np.testing.assert_allclose(nb.singular_values(x), np.linalg.svd(x, compute_uv=False), rtol=1e-10)


def test_condition_numbers():
    x = np.zeros((5, 3))
    x[0, 0], x[1, 1], x[2, 2] = 4.0, 2.0, 1.0
    assert nb.c_p(x, 0.5) == 2.0
    assert nb.c_p(x, 0.8) == 4.0
    assert nb.c_max(x) == pytest.approx(4.0)
    with pytest.raises(nb.ShapeError):
        nb.singular_values(np.ones((3, 3)))


def test_ema_update():
    mean, var = nb.ema_update(np.zeros(2), np.ones(2), np.array([1.0, 2.0]), np.array([4.0, 4.0]), 0.1)
    np.testing.assert_allclose(mean, [0.1, 0.2])
    np.testing.assert_allclose(var, [1.3, 1.3])


def test_bn_and_ln_forward():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, size=(32, 4))
    y = nb.bn_forward(x)
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-4)
    pop = nb.bn_forward(x, mean=x.mean(axis=0), var=x.var(axis=0))
    np.testing.assert_allclose(pop, y, atol=1e-12)
    z = nb.ln_forward(x)
    np.testing.assert_allclose(z.mean(axis=1), 0.0, atol=1e-12)


def test_tid_hand_case():
    batches = [[(np.array([0.3, -0.4]), np.array([1.0, 1.0]))]]
    population = [(np.zeros(2), np.ones(2))]
    rep = nb.tid(batches, population)
    assert rep["per_layer"][0]["mean_tid"] == pytest.approx(0.5 / (math.sqrt(2) + 1e-8), abs=1e-12)
    avg = nb.average_statistics(batches + [[(np.array([-0.3, 0.4]), np.array([1.0, 1.0]))]])
    np.testing.assert_allclose(avg[0][0], [0.0, 0.0], atol=1e-15)


def test_run_and_cli(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("task.train_size = 128\ntask.valid_size = 32\noptim.steps = 20\nmeasure.log_every = 10\n")
    s = nb.run(config=str(cfg), out=str(tmp_path / "r"))
    assert s["steps_completed"] == 20
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["config_hash"] == s["config_hash"]
    arrays = nb.load_checkpoint(str(tmp_path / "r" / "checkpoint.nbck"))
    assert "embed.token" in arrays
    assert nb.cli(["report", str(tmp_path / "r")]) == 0

    bad = tmp_path / "bad.cfg"
    bad.write_text("lambada = 0.1\n")
    assert nb.cli(["run", "--config", str(bad)]) == 2
    with pytest.raises(nb.ConfigError, match="lambada"):
        nb.run(config=str(bad))


def test_config_keys_documented():
    keys = {k for k, _, _ in nb.config_keys}
    assert {"norm.lambda", "norm.nu", "task.kind", "optim.steps"} <= keys
    assert all(doc for _, _, doc in nb.config_keys)
