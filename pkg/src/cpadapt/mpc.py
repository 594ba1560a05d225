"""Receding-horizon controller over the nominal-plus-residual model.

The optimal control problem is solved by direct shooting: the decision
variables are the control sequence only, states come from rolling the model
forward.  The solver is projected gradient descent with a backtracking line
search under box control constraints; gradients are finite differences of
the rollout cost, evaluated for all perturbed sequences in one batched
rollout, which keeps the per-solve cost low without an analytic adjoint.

Model uncertainty enters through the state weights: before each solve the
per-dimension predictive variance of the adapted residual model scales the
quadratic state penalty, so the controller tracks aggressively where the
model is trustworthy and backs off where it is not.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import cartpole
from .adapt import Beam, marginal_decoder, total_variance
from .encoder import EncoderParams, encode, encode_batch
from .validation import ConfigError, DimensionError, as_vector


@dataclass
class OcpConfig:
    """Horizon, weights, bounds, and solver knobs of the tracking problem.

    state_weights / control_weights / terminal_weights are the diagonals of
    the quadratic stage and terminal costs.  alpha1 and alpha2 shape the
    uncertainty modulation Q_j -> Q_j * (1 + alpha1 * log(1 + alpha2 * var_j)).
    """

    horizon: int = 25
    state_weights: np.ndarray = field(default_factory=lambda: np.array([10.0, 1.0, 100.0, 1.0]))
    control_weights: np.ndarray = field(default_factory=lambda: np.array([0.1]))
    terminal_weights: np.ndarray = field(default_factory=lambda: np.array([100.0, 10.0, 1000.0, 10.0]))
    u_min: np.ndarray = field(default_factory=lambda: np.array([-20.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([20.0]))
    alpha1: float = 10.0
    alpha2: float = 1e3
    max_iters: int = 30
    step_size: float = 1.0
    tol: float = 1e-8
    smoothness_weight: float = 0.0
    soft_state_weight: float = 0.0
    state_bound: np.ndarray | None = None

    def validate(self) -> "OcpConfig":
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be >= 1")
        for name in ("state_weights", "control_weights", "terminal_weights"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} must be nonnegative and finite")
        u_min = np.asarray(self.u_min, dtype=np.float64)
        u_max = np.asarray(self.u_max, dtype=np.float64)
        if u_min.shape != u_max.shape or np.any(u_min >= u_max):
            raise ConfigError("control bounds must satisfy u_min < u_max elementwise")
        if self.max_iters < 1 or self.step_size <= 0 or self.tol <= 0:
            raise ConfigError("max_iters, step_size, and tol must be positive")
        return self


class NominalCartpole:
    """Batched one-step rollout model of the nominal plant."""

    def __init__(self, params: cartpole.PlantParams, dt: float):
        self.params = params
        self.dt = float(dt)

    def step(self, X, U):
        return cartpole.nominal_step(X, U, self.params, self.dt)


class AdaptedCartpole:
    """Nominal model plus the beam-marginal decoded residual.

    By default the features are re-encoded at every predicted state along the
    rollout; freeze_features evaluates them once at the anchor state instead
    (cheaper, slightly staler residuals).
    """

    def __init__(
        self,
        nominal: NominalCartpole,
        encoder_params: EncoderParams,
        decoder: np.ndarray,
        freeze_features: bool = False,
    ):
        self.nominal = nominal
        self.encoder_params = encoder_params
        self.decoder = np.asarray(decoder, dtype=np.float64)
        self.freeze_features = freeze_features
        self._frozen_residual = None

    def set_anchor(self, x, u) -> None:
        """Fix the frozen-feature residual at the rollout's starting point."""
        g = encode(self.encoder_params, x, u)
        self._frozen_residual = self.decoder @ g.mean

    def step(self, X, U):
        base = self.nominal.step(X, U)
        if self.freeze_features:
            if self._frozen_residual is None:
                raise ConfigError("freeze_features requires set_anchor before rollout")
            return base + self._frozen_residual
        X2 = np.atleast_2d(np.asarray(X, dtype=np.float64))
        U2 = np.atleast_2d(np.asarray(U, dtype=np.float64))
        inputs = np.hstack([X2, U2])
        # diverging rollout branches must surface as infinite cost, not as a
        # validation error inside the encoder, so they are masked out here
        ok = np.all(np.isfinite(inputs), axis=1) & np.all(np.abs(inputs) < 1e100, axis=1)
        resid = np.full((inputs.shape[0], self.decoder.shape[0]), np.nan)
        if np.any(ok):
            mu, _ = encode_batch(self.encoder_params, inputs[ok])
            resid[ok] = mu @ self.decoder.T
        return base + resid.reshape(np.shape(base))


def modulate_weights(state_weights, total_var, alpha1: float, alpha2: float) -> np.ndarray:
    """Inflate each state weight by 1 + alpha1 * log(1 + alpha2 * variance)."""
    q = as_vector(state_weights, name="state_weights")
    v = as_vector(total_var, n=q.shape[0], name="total_var")
    if np.any(v < 0):
        raise ConfigError("total_var entries must be nonnegative")
    return q * (1.0 + alpha1 * np.log1p(alpha2 * v))


def rollout(x0, controls, model) -> np.ndarray:
    """States visited by applying a (N, m) control sequence from x0."""
    x0 = as_vector(x0, name="x0")
    controls = np.asarray(controls, dtype=np.float64)
    states = np.empty((controls.shape[0] + 1, x0.shape[0]))
    states[0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(controls.shape[0]):
            states[i + 1] = model.step(states[i], controls[i])
    return states


def _rollout_batch(x0, control_batch, model) -> np.ndarray:
    """States for a (B, N, m) batch of control sequences, shared x0."""
    B, N, _ = control_batch.shape
    states = np.empty((B, N + 1, x0.shape[0]))
    states[:] = x0[None, None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            states[:, i + 1] = model.step(states[:, i], control_batch[:, i])
    return states


def _cost_of_states(states, controls, cfg: OcpConfig, x_ref, u_ref):
    """Quadratic tracking cost of one or a batch of rollouts; inf if non-finite.

    states: (..., N+1, d), controls: (..., N, m).
    """
    q = np.asarray(cfg.state_weights, dtype=np.float64)
    r = np.asarray(cfg.control_weights, dtype=np.float64)
    p = np.asarray(cfg.terminal_weights, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        dx = states[..., :-1, :] - x_ref
        du = controls - u_ref
        cost = np.sum(dx * dx * q, axis=(-2, -1)) + np.sum(du * du * r, axis=(-2, -1))
        dT = states[..., -1, :] - x_ref
        cost = cost + np.sum(dT * dT * p, axis=-1)
        if cfg.smoothness_weight > 0 and controls.shape[-2] > 1:
            jumps = np.diff(controls, axis=-2)
            cost = cost + cfg.smoothness_weight * np.sum(jumps * jumps, axis=(-2, -1))
        if cfg.soft_state_weight > 0 and cfg.state_bound is not None:
            bound = np.asarray(cfg.state_bound, dtype=np.float64)
            excess = np.maximum(np.abs(states) - bound, 0.0)
            cost = cost + cfg.soft_state_weight * np.sum(excess * excess, axis=(-2, -1))
    return np.where(np.isfinite(cost), cost, np.inf)


def rollout_cost(x0, controls, model, cfg: OcpConfig, x_ref=None, u_ref=None) -> float:
    """Total cost of one control sequence from x0 under the given model."""
    cfg.validate()
    controls = np.asarray(controls, dtype=np.float64)
    if controls.ndim != 2 or controls.shape[0] != cfg.horizon:
        raise DimensionError(
            f"controls must have shape ({cfg.horizon}, m), got {controls.shape}"
        )
    x0 = as_vector(x0, name="x0")
    x_ref = np.zeros(x0.shape[0]) if x_ref is None else as_vector(x_ref, n=x0.shape[0])
    u_ref = np.zeros(controls.shape[1]) if u_ref is None else as_vector(u_ref, n=controls.shape[1])
    states = rollout(x0, controls, model)
    with np.errstate(invalid="ignore"):
        return float(_cost_of_states(states, controls, cfg, x_ref, u_ref))


def shift_warm_start(controls) -> np.ndarray:
    """Receding-horizon warm start: drop the applied step, repeat the last."""
    controls = np.asarray(controls, dtype=np.float64)
    return np.vstack([controls[1:], controls[-1:]])


def solve_ocp(x0, model, cfg: OcpConfig, warm_start=None, x_ref=None, u_ref=None) -> dict:
    """Projected-gradient direct shooting from a warm start.

    Gradients are forward finite differences of the rollout cost, with all
    horizon * m perturbed sequences rolled out in one batch.  Step sizes
    backtrack until the cost decreases; iteration stops when an entire sweep
    cannot improve the cost by more than tol (relative).  The returned cost
    never exceeds the warm start's.
    """
    cfg.validate()
    x0 = as_vector(x0, name="x0")
    d = x0.shape[0]
    m = np.asarray(cfg.u_min).shape[0]
    N = int(cfg.horizon)
    x_ref = np.zeros(d) if x_ref is None else as_vector(x_ref, n=d)
    u_ref = np.zeros(m) if u_ref is None else as_vector(u_ref, n=m)
    lo = np.broadcast_to(np.asarray(cfg.u_min, dtype=np.float64), (N, m))
    hi = np.broadcast_to(np.asarray(cfg.u_max, dtype=np.float64), (N, m))

    if warm_start is None:
        U = np.zeros((N, m))
    else:
        U = np.asarray(warm_start, dtype=np.float64).reshape(N, m).copy()
    U = np.clip(U, lo, hi)

    def cost_one(controls):
        states = rollout(x0, controls, model)
        return float(_cost_of_states(states, controls, cfg, x_ref, u_ref))

    J = cost_one(U)
    if not np.isfinite(J):
        return {"controls": U, "cost": J, "iterations": 0, "converged": False}

    h = 1e-6
    eye = np.eye(N * m).reshape(N * m, N, m)
    step_grid = cfg.step_size * 0.5 ** np.arange(16)
    iterations = 0
    converged = False
    for _ in range(int(cfg.max_iters)):
        iterations += 1
        perturbed = np.clip(U[None, :, :] + h * eye, lo, hi)
        states = _rollout_batch(x0, perturbed, model)
        Js = _cost_of_states(states, perturbed, cfg, x_ref, u_ref)
        actual = (perturbed - U[None, :, :]).reshape(N * m, -1).sum(axis=1)
        grad = np.zeros(N * m)
        free = actual > 0  # entries pinned at the upper bound have zero forward room
        grad[free] = (Js[free] - J) / actual[free]
        grad = grad.reshape(N, m)

        # backtracking line search, all candidate steps rolled out in one batch
        candidates = np.clip(U[None, :, :] - step_grid[:, None, None] * grad[None, :, :], lo, hi)
        cand_states = _rollout_batch(x0, candidates, model)
        cand_costs = _cost_of_states(cand_states, candidates, cfg, x_ref, u_ref)
        ok = np.nonzero(cand_costs < J - cfg.tol * max(1.0, abs(J)))[0]
        if ok.size == 0:
            converged = True
            break
        U, J = candidates[ok[0]], float(cand_costs[ok[0]])
    return {"controls": U, "cost": J, "iterations": iterations, "converged": converged}


def control_step(
    x,
    beam: Beam,
    encoder_params: EncoderParams,
    decoder_prior: np.ndarray,
    cfg: OcpConfig,
    nominal: NominalCartpole,
    warm_start=None,
    x_ref=None,
    freeze_features: bool = False,
    modulate: bool = True,
) -> dict:
    """One receding-horizon decision with uncertainty-modulated weights.

    Encodes the current state with the warm start's first control, modulates
    the state weights once with the beam's total predictive variance, builds
    the adapted model around the beam-marginal decoder, and solves the OCP.
    decoder_prior is only a shape/width fallback when the beam is absent.
    """
    cfg.validate()
    x = as_vector(x, name="x")
    N = int(cfg.horizon)
    m = np.asarray(cfg.u_min).shape[0]
    if warm_start is None:
        warm_start = np.zeros((N, m))
    u_anchor = np.asarray(warm_start, dtype=np.float64).reshape(N, m)[0]

    if beam is not None:
        g = encode(encoder_params, x, u_anchor)
        tvar = total_variance(beam, g.mean, g.var)
        decoder = marginal_decoder(beam)
    else:
        tvar = np.zeros(x.shape[0])
        decoder = np.asarray(decoder_prior, dtype=np.float64)

    if modulate:
        q_mod = modulate_weights(cfg.state_weights, tvar, cfg.alpha1, cfg.alpha2)
    else:
        q_mod = np.asarray(cfg.state_weights, dtype=np.float64)
    cfg_step = replace(cfg, state_weights=q_mod)

    model = AdaptedCartpole(nominal, encoder_params, decoder, freeze_features=freeze_features)
    if freeze_features:
        model.set_anchor(x, u_anchor)
    result = solve_ocp(x, model, cfg_step, warm_start=warm_start, x_ref=x_ref)
    result["control"] = result["controls"][0]
    result["total_variance"] = tvar
    result["state_weights"] = q_mod
    return result
