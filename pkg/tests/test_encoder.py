"""Encoder, loss, and trainer tests.

The gradient tests treat central finite differences of the loss as the
oracle; the analytic backprop must agree to high relative precision.
"""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cpadapt import (
    ConfigError,
    DimensionError,
    LatentGaussian,
    OfflineTrainConfig,
    ResidualEncoder,
    TrainingDiverged,
    encode,
    encode_batch,
    kl_to_standard_normal,
    sample_latent,
    train_offline,
    variational_loss,
)
from cpadapt.encoder import (
    flatten_params,
    init_params,
    load_model,
    save_model,
    set_flat_params,
)


class TestLatentOps:
    def test_kl_zero_iff_standard_normal(self):
        g = LatentGaussian(np.zeros(3), np.ones(3))
        assert kl_to_standard_normal(g) == 0.0
        rng = np.random.default_rng(0)
        for _ in range(100):
            mean = rng.normal(size=3)
            var = np.exp(rng.normal(size=3))
            val = kl_to_standard_normal(LatentGaussian(mean, var))
            assert val >= 0.0
            if np.any(np.abs(mean) > 1e-12) or np.any(np.abs(var - 1) > 1e-12):
                assert val > 0.0

    def test_kl_closed_form_values(self):
        # scalar KL = 0.5 * (mu^2 + v - ln v - 1), summed over dimensions
        g = LatentGaussian(np.array([1.0]), np.array([1.0]))
        np.testing.assert_allclose(kl_to_standard_normal(g), 0.5)
        g = LatentGaussian(np.array([0.0, 0.0]), np.array([2.0, 1.0]))
        np.testing.assert_allclose(kl_to_standard_normal(g), 0.5 * (2.0 - np.log(2.0) - 1.0))

    def test_kl_rejects_nonpositive_variance(self):
        with pytest.raises(ConfigError):
            kl_to_standard_normal(LatentGaussian(np.zeros(2), np.array([1.0, 0.0])))

    def test_sample_latent_reparameterization(self):
        g = LatentGaussian(np.array([1.0, -1.0]), np.array([4.0, 9.0]))
        out = sample_latent(g, np.array([0.5, -1.0]))
        np.testing.assert_allclose(out, [1.0 + 2.0 * 0.5, -1.0 - 3.0])

    def test_sample_latent_length_mismatch(self):
        g = LatentGaussian(np.zeros(2), np.ones(2))
        with pytest.raises(DimensionError):
            sample_latent(g, np.zeros(3))


class TestEncode:
    def test_encode_is_deterministic(self):
        params = init_params(5, 2, rng=np.random.default_rng(1))
        x, u = np.arange(4.0), np.array([0.5])
        a = encode(params, x, u)
        b = encode(params, x, u)
        np.testing.assert_array_equal(a.mean, b.mean)
        np.testing.assert_array_equal(a.var, b.var)

    def test_encode_shapes_and_positive_variance(self):
        params = init_params(5, 3, rng=np.random.default_rng(2))
        g = encode(params, np.zeros(4), np.zeros(1))
        assert g.mean.shape == (3,) and g.var.shape == (3,)
        assert np.all(g.var > 0)

    def test_logvar_clamp_bounds_variance(self):
        params = init_params(5, 2, rng=np.random.default_rng(3))
        params.biases[-1][:] = 1e4  # drive the variance head far past the clamp
        g = encode(params, np.zeros(4), np.zeros(1))
        np.testing.assert_allclose(g.var, np.exp(10.0))

    def test_encode_batch_matches_single(self):
        params = init_params(5, 2, rng=np.random.default_rng(4))
        rng = np.random.default_rng(5)
        X = rng.normal(size=(6, 4))
        U = rng.normal(size=(6, 1))
        mu, var = encode_batch(params, np.hstack([X, U]))
        for i in range(6):
            g = encode(params, X[i], U[i])
            np.testing.assert_allclose(mu[i], g.mean)
            np.testing.assert_allclose(var[i], g.var)

    def test_encode_rejects_wrong_input_length(self):
        params = init_params(5, 2, rng=np.random.default_rng(6))
        with pytest.raises(DimensionError):
            encode(params, np.zeros(4), np.zeros(2))


def _fd_gradient(params, theta0, inputs, targets, noise, kl_weight, deterministic, h=1e-5):
    flat = flatten_params(params, theta0).copy()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        for sign in (+1, -1):
            flat[i] += sign * h
            set_flat_params(params, theta0, flat)
            loss, _, _ = variational_loss(
                params, theta0, inputs, targets, noise, kl_weight, deterministic
            )
            grad[i] += sign * loss
            flat[i] -= sign * h
        set_flat_params(params, theta0, flat)
    return grad / (2.0 * h)


class TestLossGradients:
    @pytest.mark.parametrize("deterministic", [False, True])
    def test_backprop_matches_finite_differences(self, deterministic):
        rng = np.random.default_rng(7)
        params = init_params(4, 2, hidden=(3, 4, 3), rng=rng)
        theta0 = rng.normal(size=(3, 2))
        inputs = rng.normal(size=(5, 4))
        targets = rng.normal(size=(5, 3))
        noise = rng.standard_normal((5, 2))
        _, grads, _ = variational_loss(params, theta0, inputs, targets, noise, 0.1, deterministic)
        analytic = np.concatenate([g.ravel() for g in grads])
        fd = _fd_gradient(params, theta0, inputs, targets, noise, 0.1, deterministic)
        err = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1.0)
        assert err < 1e-6

    def test_loss_decomposition(self):
        rng = np.random.default_rng(8)
        params = init_params(3, 2, hidden=(3, 3, 3), rng=rng)
        theta0 = rng.normal(size=(2, 2))
        inputs = rng.normal(size=(4, 3))
        targets = rng.normal(size=(4, 2))
        noise = rng.standard_normal((4, 2))
        loss, _, stats = variational_loss(params, theta0, inputs, targets, noise, 0.3)
        np.testing.assert_allclose(loss, stats["data"] + 0.3 * stats["kl"])
        assert stats["kl"] >= 0.0

    def test_deterministic_mode_ignores_noise(self):
        rng = np.random.default_rng(9)
        params = init_params(3, 2, hidden=(3, 3, 3), rng=rng)
        theta0 = rng.normal(size=(2, 2))
        inputs = rng.normal(size=(4, 3))
        targets = rng.normal(size=(4, 2))
        l1, _, _ = variational_loss(params, theta0, inputs, targets,
                                    rng.standard_normal((4, 2)), 0.1, deterministic=True)
        l2, _, _ = variational_loss(params, theta0, inputs, targets,
                                    rng.standard_normal((4, 2)), 0.1, deterministic=True)
        assert l1 == l2


class TestTrainer:
    def test_realizable_target_loss_collapses(self):
        # targets generated by a frozen random encoder-decoder pair of the
        # same topology; the trainer must drive the fit loss way down
        rng = np.random.default_rng(10)
        frozen = init_params(3, 2, rng=np.random.default_rng(99))
        theta_star = np.random.default_rng(98).normal(size=(2, 2))
        inputs = rng.normal(size=(256, 3))
        mu, _ = encode_batch(frozen, inputs)
        targets = mu @ theta_star.T
        cfg = OfflineTrainConfig(
            latent_dim=2, kl_weight=0.0, deterministic=True,
            learning_rate=3e-3, batch_size=64, epochs=400, seed=0,
        )
        _, _, history = train_offline(inputs, targets, cfg)
        assert history[-1] < 1e-3 * history[0]

    def test_loss_curve_improves(self):
        rng = np.random.default_rng(11)
        inputs = rng.normal(size=(400, 4))
        targets = np.tanh(inputs[:, :2]) + 0.05 * rng.normal(size=(400, 2))
        cfg = OfflineTrainConfig(latent_dim=2, epochs=20, seed=1)
        _, _, history = train_offline(inputs, targets, cfg)
        assert history[-1] <= history[0]

    def test_training_is_reproducible(self):
        rng = np.random.default_rng(12)
        inputs = rng.normal(size=(200, 4))
        targets = rng.normal(size=(200, 2))
        cfg = OfflineTrainConfig(latent_dim=2, epochs=3, seed=5)
        p1, t1, h1 = train_offline(inputs, targets, cfg)
        p2, t2, h2 = train_offline(inputs, targets, cfg)
        np.testing.assert_array_equal(t1, t2)
        np.testing.assert_array_equal(flatten_params(p1, t1), flatten_params(p2, t2))
        assert h1 == h2

    def test_divergence_guard_raises(self):
        rng = np.random.default_rng(13)
        inputs = 10.0 * rng.normal(size=(200, 4))
        targets = 10.0 * rng.normal(size=(200, 2))
        cfg = OfflineTrainConfig(latent_dim=2, epochs=50, learning_rate=1e6, seed=0)
        with pytest.raises(TrainingDiverged):
            train_offline(inputs, targets, cfg)


class TestModelPersistence:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(14)
        params = init_params(5, 2, rng=rng)
        theta0 = rng.normal(size=(4, 2))
        path = tmp_path / "model.json"
        save_model(path, params, theta0, state_dim=4, control_dim=1)
        loaded, theta_loaded, meta = load_model(path)
        np.testing.assert_array_equal(theta_loaded, theta0)
        for a, b in zip(loaded.weights, params.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.biases, params.biases):
            np.testing.assert_array_equal(a, b)
        assert meta == {"state_dim": 4, "control_dim": 1}
        inp = rng.normal(size=(3, 5))
        np.testing.assert_array_equal(
            encode_batch(loaded, inp)[0], encode_batch(params, inp)[0]
        )


class TestResidualEncoderEstimator:
    def test_fit_transform_predict_shapes(self):
        rng = np.random.default_rng(15)
        X = rng.normal(size=(300, 5))
        y = 0.5 * X[:, :4] ** 2 - 0.3
        est = ResidualEncoder(latent_dim=2, epochs=5, random_state=0)
        est.fit(X, y)
        assert est.transform(X).shape == (300, 2)
        assert est.predict(X).shape == (300, 4)
        mu, var = est.transform_dist(X)
        assert mu.shape == var.shape == (300, 2)
        assert np.all(var > 0)

    def test_unfitted_raises(self):
        with pytest.raises(NotFittedError):
            ResidualEncoder().transform(np.zeros((1, 5)))

    def test_clone_and_params_round_trip(self):
        est = ResidualEncoder(latent_dim=3, kl_weight=0.2, epochs=7)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()
