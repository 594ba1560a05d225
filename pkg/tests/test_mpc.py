"""Controller tests, from the scalar analytic toy problem up to cartpole stabilization."""

import numpy as np
import pytest

from cpadapt import AdaptConfig, ConfigError, init_beam
from cpadapt.cartpole import accel, nominal_params, true_params
from cpadapt.encoder import init_params
from cpadapt.mpc import (
    AdaptedCartpole,
    NominalCartpole,
    OcpConfig,
    control_step,
    modulate_weights,
    rollout,
    rollout_cost,
    shift_warm_start,
    solve_ocp,
)


class ScalarIntegrator:
    """Toy model x' = x + u used for closed-form solver checks."""

    def step(self, X, U):
        X = np.asarray(X, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        return X + U.reshape(X.shape)


def scalar_cfg(**kw):
    base = dict(
        horizon=1,
        state_weights=np.array([1.0]),
        control_weights=np.array([0.0]),
        terminal_weights=np.array([1.0]),
        u_min=np.array([-5.0]),
        u_max=np.array([5.0]),
        max_iters=50,
        step_size=1.0,
    )
    base.update(kw)
    return OcpConfig(**base)


class TestModulation:
    def test_hand_value(self):
        out = modulate_weights(np.array([1.0]), np.array([0.001]), 10.0, 1e3)
        np.testing.assert_allclose(out, [1.0 + 10.0 * np.log(2.0)], rtol=1e-12)

    def test_zero_variance_leaves_weights_alone(self):
        q = np.array([10.0, 1.0, 100.0, 1.0])
        np.testing.assert_array_equal(modulate_weights(q, np.zeros(4), 10.0, 1e3), q)

    def test_per_dimension_and_monotone(self):
        q = np.array([2.0, 2.0])
        out = modulate_weights(q, np.array([0.0, 1.0]), 10.0, 1e3)
        assert out[0] == 2.0 and out[1] > 2.0
        more = modulate_weights(q, np.array([0.0, 2.0]), 10.0, 1e3)
        assert more[1] > out[1]

    def test_negative_variance_rejected(self):
        with pytest.raises(ConfigError):
            modulate_weights(np.ones(2), np.array([0.1, -0.1]), 10.0, 1e3)


class TestRolloutCost:
    def test_shapes_and_chaining(self):
        model = ScalarIntegrator()
        states = rollout(np.array([1.0]), np.array([[1.0], [2.0]]), model)
        np.testing.assert_allclose(states, [[1.0], [2.0], [4.0]])

    def test_one_step_hand_value(self):
        cfg = scalar_cfg(terminal_weights=np.array([0.0]))
        cost = rollout_cost(np.array([1.0]), np.array([[-1.0]]), ScalarIntegrator(), cfg)
        np.testing.assert_allclose(cost, 1.0)  # only the fixed initial stage remains

    def test_weight_homogeneity(self):
        rng = np.random.default_rng(0)
        U = rng.normal(size=(4, 1))
        cfg = scalar_cfg(horizon=4, control_weights=np.array([0.3]))
        doubled = scalar_cfg(
            horizon=4,
            state_weights=2 * np.asarray(cfg.state_weights),
            control_weights=2 * np.asarray(cfg.control_weights),
            terminal_weights=2 * np.asarray(cfg.terminal_weights),
        )
        c1 = rollout_cost(np.array([0.7]), U, ScalarIntegrator(), cfg)
        c2 = rollout_cost(np.array([0.7]), U, ScalarIntegrator(), doubled)
        np.testing.assert_allclose(c2, 2 * c1, rtol=1e-12)

    def test_divergent_rollout_costs_inf(self):
        class Doubler:
            def step(self, X, U):
                return X * 1e200

        cfg = scalar_cfg(horizon=3)
        cost = rollout_cost(np.array([1.0]), np.zeros((3, 1)), Doubler(), cfg)
        assert cost == np.inf

    def test_smoothness_penalty(self):
        cfg = scalar_cfg(horizon=2, smoothness_weight=10.0, terminal_weights=np.array([0.0]),
                         state_weights=np.array([0.0]))
        U = np.array([[1.0], [3.0]])
        cost = rollout_cost(np.array([0.0]), U, ScalarIntegrator(), cfg)
        np.testing.assert_allclose(cost, 10.0 * 4.0)

    def test_wrong_horizon_rejected(self):
        with pytest.raises(Exception):
            rollout_cost(np.array([1.0]), np.zeros((3, 1)), ScalarIntegrator(), scalar_cfg())


class TestSolver:
    def test_matches_analytic_optimum(self):
        # J(u) = x0^2 + (x0 + u)^2 is minimized at u = -x0
        res = solve_ocp(np.array([1.0]), ScalarIntegrator(), scalar_cfg())
        np.testing.assert_allclose(res["controls"][0, 0], -1.0, atol=1e-4)
        np.testing.assert_allclose(res["cost"], 1.0, atol=1e-6)

    def test_warm_start_at_optimum_terminates_fast(self):
        res = solve_ocp(
            np.array([1.0]), ScalarIntegrator(), scalar_cfg(), warm_start=np.array([[-1.0]])
        )
        assert res["converged"]
        assert res["iterations"] <= 2
        np.testing.assert_allclose(res["cost"], 1.0, atol=1e-8)

    def test_never_worse_than_warm_start(self):
        rng = np.random.default_rng(1)
        model = ScalarIntegrator()
        cfg = scalar_cfg(horizon=6, control_weights=np.array([0.05]))
        for _ in range(10):
            warm = rng.uniform(-4, 4, size=(6, 1))
            j_warm = rollout_cost(np.array([2.0]), warm, model, cfg)
            res = solve_ocp(np.array([2.0]), model, cfg, warm_start=warm)
            assert res["cost"] <= j_warm + 1e-12

    def test_respects_box_bounds(self):
        cfg = scalar_cfg(u_min=np.array([-0.4]), u_max=np.array([0.4]))
        res = solve_ocp(np.array([1.0]), ScalarIntegrator(), cfg)
        np.testing.assert_allclose(res["controls"][0, 0], -0.4, atol=1e-9)

    def test_infinite_warm_start_cost_returned_unconverged(self):
        class Exploder:
            def step(self, X, U):
                return X * 1e300

        res = solve_ocp(np.array([1.0]), Exploder(), scalar_cfg(horizon=2))
        assert res["cost"] == np.inf and not res["converged"]


class ExactCartpole:
    """Deterministic true-parameter plant used as its own prediction model."""

    def __init__(self, dt):
        self.params = true_params()
        self.dt = dt

    def step(self, X, U):
        X = np.asarray(X, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        u = U.reshape(X.shape[:-1] + (1,))[..., 0] if U.ndim else U
        xdd, thdd = accel(X, u, self.params, friction=True)
        nxt = np.empty_like(X)
        nxt[..., 0] = X[..., 0] + self.dt * X[..., 1]
        nxt[..., 1] = X[..., 1] + self.dt * xdd
        nxt[..., 2] = X[..., 2] + self.dt * X[..., 3]
        nxt[..., 3] = X[..., 3] + self.dt * thdd
        return nxt


def test_receding_horizon_stabilizes_upright():
    # perfect model, no disturbance: the loop must bring the pole to rest
    dt = 0.1
    model = ExactCartpole(dt)
    cfg = OcpConfig(max_iters=25)
    state = np.array([0.0, 0.0, 0.15, 0.0])
    warm = np.zeros((cfg.horizon, 1))
    for _ in range(120):
        res = solve_ocp(state, model, cfg, warm_start=warm)
        state = model.step(state, res["controls"][0])
        warm = shift_warm_start(res["controls"])
    assert abs(state[2]) < 0.05
    assert abs(state[3]) < 0.2


class TestAdaptedModel:
    def test_residual_added_to_nominal(self):
        rng = np.random.default_rng(2)
        nominal = NominalCartpole(nominal_params(), dt=0.1)
        enc = init_params(5, 2, rng=rng)
        decoder = rng.normal(size=(4, 2))
        model = AdaptedCartpole(nominal, enc, decoder)
        X = rng.normal(size=(3, 4))
        U = rng.normal(size=(3, 1))
        from cpadapt.encoder import encode_batch

        mu, _ = encode_batch(enc, np.hstack([X, U]))
        np.testing.assert_allclose(model.step(X, U), nominal.step(X, U) + mu @ decoder.T)

    def test_frozen_features_use_anchor(self):
        rng = np.random.default_rng(3)
        nominal = NominalCartpole(nominal_params(), dt=0.1)
        enc = init_params(5, 2, rng=rng)
        decoder = rng.normal(size=(4, 2))
        model = AdaptedCartpole(nominal, enc, decoder, freeze_features=True)
        with pytest.raises(ConfigError):
            model.step(np.zeros(4), np.zeros(1))
        anchor = rng.normal(size=4)
        model.set_anchor(anchor, np.zeros(1))
        X = rng.normal(size=(2, 4))
        U = rng.normal(size=(2, 1))
        diff = model.step(X, U) - nominal.step(X, U)
        np.testing.assert_allclose(diff[0], diff[1])  # same residual everywhere


class TestControlStep:
    def test_modulated_weights_reported(self):
        rng = np.random.default_rng(4)
        enc = init_params(5, 2, rng=rng)
        theta0 = rng.normal(size=(4, 2))
        beam = init_beam(theta0, AdaptConfig())
        nominal = NominalCartpole(nominal_params(), dt=0.1)
        cfg = OcpConfig(max_iters=3)
        res = control_step(np.array([0.1, 0.0, 0.05, 0.0]), beam, enc, theta0, cfg, nominal)
        assert res["control"].shape == (1,)
        assert np.all(res["control"] >= cfg.u_min) and np.all(res["control"] <= cfg.u_max)
        assert np.all(res["state_weights"] >= np.asarray(cfg.state_weights))
        assert np.all(res["total_variance"] >= 0)

    def test_no_beam_means_no_modulation(self):
        rng = np.random.default_rng(5)
        enc = init_params(5, 2, rng=rng)
        theta0 = rng.normal(size=(4, 2))
        nominal = NominalCartpole(nominal_params(), dt=0.1)
        cfg = OcpConfig(max_iters=3)
        res = control_step(np.zeros(4), None, enc, theta0, cfg, nominal)
        np.testing.assert_array_equal(res["state_weights"], np.asarray(cfg.state_weights))
        np.testing.assert_array_equal(res["total_variance"], np.zeros(4))


def test_shift_warm_start():
    U = np.array([[1.0], [2.0], [3.0]])
    np.testing.assert_array_equal(shift_warm_start(U), [[2.0], [3.0], [3.0]])
