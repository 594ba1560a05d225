"""Cartpole benchmark plant with a deliberately wrong nominal twin.

State vector is (x, x_dot, theta, theta_dot) with theta measured from the
upright pole position.  Two models of the same rig live here:

* the true plant: pole-cart dynamics with cart and pivot friction plus a
  Gaussian lateral disturbance force on the cart, and
* the nominal model: the friction-free, disturbance-free equations with
  miscalibrated masses and pole length, which is all the controller and the
  offline learner are allowed to know.

Both are discretized with forward Euler at a shared dt, so the residual the
learner sees is exactly (true accelerations - nominal accelerations) * dt on
the velocity components.  Scheduled interventions (a one-step lateral impulse
plus a mass rescaling) turn the true plant piecewise-stationary.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .validation import SimulationBlowUp

STATE_DIM = 4
CONTROL_DIM = 1


@dataclass
class PlantParams:
    """Physical constants of one cartpole regime."""

    cart_mass: float
    pole_mass: float
    pole_length: float
    gravity: float = 9.81
    cart_friction: float = 0.0
    pivot_friction: float = 0.0
    dist_mean: float = 0.0
    dist_std: float = 0.0


def true_params() -> PlantParams:
    """Ground-truth rig: frictions and a biased lateral disturbance force."""
    return PlantParams(
        cart_mass=1.0,
        pole_mass=0.1,
        pole_length=1.5,
        cart_friction=0.25,
        pivot_friction=0.05,
        dist_mean=-0.5,
        dist_std=0.5,
    )


def nominal_params() -> PlantParams:
    """Miscalibrated frictionless model handed to the controller."""
    return PlantParams(cart_mass=1.7, pole_mass=0.25, pole_length=1.7)


@dataclass
class CartpoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])

    @classmethod
    def from_array(cls, arr) -> "CartpoleState":
        x, x_dot, theta, theta_dot = np.asarray(arr, dtype=np.float64)
        return cls(float(x), float(x_dot), float(theta), float(theta_dot))


def accel(state, u, params: PlantParams, u_dist=0.0, friction: bool = True):
    """Cart and pole angular accelerations; broadcasts over leading axes.

    state has shape (..., 4), u and u_dist broadcast against state[..., 0].
    Returns (x_ddot, theta_ddot).
    """
    state = np.asarray(state, dtype=np.float64)
    x_dot = state[..., 1]
    theta = state[..., 2]
    theta_dot = state[..., 3]
    u = np.asarray(u, dtype=np.float64)

    M, m = params.cart_mass, params.pole_mass
    L, g = params.pole_length, params.gravity
    mu_c = params.cart_friction if friction else 0.0
    mu_p = params.pivot_friction if friction else 0.0

    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    force = u + u_dist
    denom = M + m * sin_t**2
    x_ddot = (force - mu_c * x_dot + m * sin_t * (L * theta_dot**2 + g * cos_t)) / denom
    theta_ddot = (
        -force * cos_t
        - mu_p * theta_dot
        - m * L * theta_dot**2 * sin_t * cos_t
        + (M + m) * g * sin_t
    ) / (L * denom)
    return x_ddot, theta_ddot


def true_accel(state, u, params: PlantParams, u_dist=0.0):
    return accel(state, u, params, u_dist=u_dist, friction=True)


def nominal_accel(state, u, params: PlantParams):
    return accel(state, u, params, u_dist=0.0, friction=False)


def _euler(state, u, dt: float, params: PlantParams, u_dist, friction: bool):
    state = np.asarray(state, dtype=np.float64)
    x_ddot, theta_ddot = accel(state, u, params, u_dist=u_dist, friction=friction)
    nxt = np.empty_like(state)
    nxt[..., 0] = state[..., 0] + dt * state[..., 1]
    nxt[..., 1] = state[..., 1] + dt * x_ddot
    nxt[..., 2] = state[..., 2] + dt * state[..., 3]
    nxt[..., 3] = state[..., 3] + dt * theta_ddot
    return nxt

def nominal_step(state, u, params: PlantParams, dt: float):
    """One forward-Euler step of the nominal model; accepts batches."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim and u.shape[-1] == CONTROL_DIM:
        u = u[..., 0]
    return _euler(state, u, dt, params, u_dist=0.0, friction=False)


def true_step(
    state,
    u,
    params: PlantParams,
    dt: float,
    rng: np.random.Generator,
    k: int | None = None,
    extra_force: float = 0.0,
):
    """One forward-Euler step of the true plant with a fresh disturbance draw.

    extra_force is an additional unmodeled lateral force on the cart during
    this one transition (scheduled impulses enter here, alongside the
    stochastic disturbance).  Raises SimulationBlowUp (tagged with step k when
    given) if the next state leaves the finite range.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim and u.shape[-1] == CONTROL_DIM:
        u = u[..., 0]
    u_dist = rng.normal(params.dist_mean, params.dist_std, size=np.shape(u)) + extra_force
    with np.errstate(over="ignore", invalid="ignore"):
        nxt = _euler(state, u, dt, params, u_dist=u_dist, friction=True)
    if not np.all(np.isfinite(nxt)):
        where = f" at step {k}" if k is not None else ""
        raise SimulationBlowUp(f"true plant produced a non-finite state{where}")
    return nxt


@dataclass
class InterventionEvent:
    """One scheduled perturbation: a one-step impulse and a mass rescale."""

    step: int
    impulse: float = 2.0
    mass_scale: float = 0.9


def standard_protocol(steps=(0, 40, 80), impulse: float = 2.0, mass_scale: float = 0.9):
    return [InterventionEvent(step=int(k), impulse=impulse, mass_scale=mass_scale) for k in steps]


def apply_interventions(k: int, params: PlantParams, schedule):
    """Apply any event scheduled at step k; returns (params, extra_force).

    The mass rescale takes effect from this step's transition onward.  The
    impulse is an unmodeled lateral force on the cart during this one
    transition, entering the integrator the same way the stochastic
    disturbance does (so it lands in the residual stream instead of silently
    editing the logged state); the cart velocity jumps by roughly
    impulse * dt / total mass.
    """
    extra_force = 0.0
    for event in schedule:
        if event.step == k:
            extra_force += event.impulse
            params = replace(
                params,
                cart_mass=params.cart_mass * event.mass_scale,
                pole_mass=params.pole_mass * event.mass_scale,
            )
    return params, extra_force


def sample_initial_state(rng: np.random.Generator) -> np.ndarray:
    """Initial condition spread used for data collection and evaluation runs."""
    return np.array(
        [
            rng.uniform(-0.5, 0.5),
            rng.uniform(-0.1, 0.1),
            rng.uniform(-0.2, 0.2),
            rng.uniform(-0.1, 0.1),
        ]
    )
