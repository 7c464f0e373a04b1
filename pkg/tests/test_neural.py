import numpy as np
import pytest

from volfit.errors import ShapeMismatch
from volfit.neural import (ARCHITECTURES, MlpModel, MlpSpec, flat_gradient, init_mlp, mlp_forward, mlp_gradient,
                           mlp_train)


def reference_forward(model, x):
    """Unit-by-unit forward pass with explicit loops."""
    a = [(xi - m) / s for xi, m, s in zip(x, model.x_mean, model.x_scale)]
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        out = []
        for j in range(W.shape[1]):
            z = b[j] + sum(a[i] * W[i, j] for i in range(W.shape[0]))
            out.append(z if k == last else max(z, 0.0))
        a = out
    return a[0]


def _loss(model, X, y, lam):
    return mlp_gradient(model, X, y, lam)[0]


def finite_difference(model, X, y, lam, h=1e-5):
    theta = model.get_flat()
    g = np.empty_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += h
        model.set_flat(t)
        up = _loss(model, X, y, lam)
        t[i] -= 2 * h
        model.set_flat(t)
        down = _loss(model, X, y, lam)
        g[i] = (up - down) / (2 * h)
    model.set_flat(theta)
    return g


def _random_params(model, rng):
    # generic point: random biases keep activations off the rectifier kinks
    for b in model.biases:
        b[:] = 0.1 * rng.standard_normal(b.size)
    W = model.weights[-1]
    W[:] = rng.uniform(-1, 1, W.shape) / np.sqrt(W.shape[0])
    return model


def test_untrained_network_predicts_output_bias():
    m = init_mlp(3, (4, 2), np.random.default_rng(0), output_bias=0.7)
    np.testing.assert_array_equal(m.predict(np.random.default_rng(1).standard_normal((5, 3))), 0.7)


def test_zero_network():
    m = init_mlp(3, (4, 2), np.random.default_rng(0))
    m.set_flat(np.zeros(m.get_flat().size))
    assert mlp_forward(m, [1.0, -2.0, 3.0]) == 0.0


def test_identity_passthrough():
    m = init_mlp(1, (1,), np.random.default_rng(0))
    m.set_flat([1.0, 0.0, 1.0, 0.0])
    assert mlp_forward(m, [2.5]) == 2.5


def test_forward_matches_loops():
    rng = np.random.default_rng(1)
    m = _random_params(init_mlp(5, (4, 3), rng, x_mean=rng.standard_normal(5), x_scale=rng.uniform(0.5, 2, 5)), rng)
    for _ in range(10):
        x = rng.standard_normal(5)
        assert mlp_forward(m, x) == pytest.approx(reference_forward(m, x), abs=1e-12)


@pytest.mark.parametrize("arch", ARCHITECTURES, ids=str)
def test_gradient_matches_finite_differences(arch):
    rng = np.random.default_rng(len(arch))
    m = _random_params(init_mlp(6, arch, rng), rng)
    X = rng.standard_normal((16, 6))
    y = rng.standard_normal(16)
    g = flat_gradient(m, X, y, 1e-3)
    fd = finite_difference(m, X, y, 1e-3)
    rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
    assert rel.max() < 1e-4


def test_zero_residual_gradient_vanishes():
    rng = np.random.default_rng(2)
    m = _random_params(init_mlp(3, (4,), rng), rng)
    X = rng.standard_normal((10, 3))
    assert np.all(flat_gradient(m, X, m.predict(X), 0.0) == 0.0)


def test_penalty_gradient_linear_in_lambda():
    rng = np.random.default_rng(3)
    m = _random_params(init_mlp(3, (4, 2), rng), rng)
    X = rng.standard_normal((10, 3))
    y = m.predict(X)
    g1, g2 = flat_gradient(m, X, y, 0.01), flat_gradient(m, X, y, 0.02)
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=0)


def test_constant_target():
    rng = np.random.default_rng(4)
    X, Xv = rng.standard_normal((256, 4)), rng.standard_normal((64, 4))
    m = mlp_train(X, np.full(256, 1.5), Xv, np.full(64, 1.5), MlpSpec((4, 2)))
    assert np.max(np.abs(m.predict(Xv) - 1.5)) < 1e-2


def test_linear_target():
    rng = np.random.default_rng(5)
    x, xv = rng.uniform(0, 1, (512, 1)), rng.uniform(0, 1, (128, 1))
    m = mlp_train(x, 2 * x[:, 0], xv, 2 * xv[:, 0], MlpSpec((2,), rng_seed=1))
    assert np.mean((m.predict(xv) - 2 * xv[:, 0]) ** 2) < 0.1 * np.var(2 * xv[:, 0])


def test_training_is_deterministic():
    rng = np.random.default_rng(6)
    X, y = rng.standard_normal((128, 3)), rng.standard_normal(128)
    spec = MlpSpec((4, 2), epochs=5, rng_seed=9)
    a = mlp_train(X, y, X[:32], y[:32], spec)
    b = mlp_train(X, y, X[:32], y[:32], spec)
    np.testing.assert_array_equal(a.get_flat(), b.get_flat())


def test_best_validation_snapshot_kept():
    rng = np.random.default_rng(7)
    X, y = rng.standard_normal((128, 3)), rng.standard_normal(128)
    m = mlp_train(X, y, X[:64], y[:64], MlpSpec((8,), epochs=10))
    h = m.history
    assert h["best_val_mse"] == pytest.approx(np.min(h["val_mse"]))
    assert np.mean((m.predict(X[:64]) - y[:64]) ** 2) == pytest.approx(h["best_val_mse"])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    m = _random_params(init_mlp(4, (3, 2), rng, x_mean=np.ones(4), x_scale=2 * np.ones(4)), rng)
    m.save(tmp_path / "m.json")
    back = MlpModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.get_flat(), m.get_flat())
    X = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(back.predict(X), m.predict(X))


def test_input_width_checked():
    m = init_mlp(3, (2,), np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        m.predict(np.zeros((2, 4)))
