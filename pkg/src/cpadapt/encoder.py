"""Stochastic feature encoder and its offline variational trainer.

An MLP maps a (state, control) pair to a diagonal Gaussian over latent
features z.  Jointly with a linear decoder theta0, it is trained offline to
reconstruct one-step model residuals:

    loss = sum_k ||delta_k - theta0 z_k||^2 + kl_weight * KL(q(z_k) || N(0, I))

with z_k drawn once per sample through the reparameterization z = mu + sd * eps.
The KL term keeps the feature distribution spread out instead of collapsing
onto a thin manifold, which is what makes the features usable as regression
inputs downstream.

Gradients are computed by hand (explicit backprop through the four layers and
the sampling step); there is deliberately no autodiff dependency here.  The
optimizer is a self-contained Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import json
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .validation import (
    ConfigError,
    DimensionError,
    NumericFailure,
    TrainingDiverged,
    as_matrix,
    as_vector,
)

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class EncoderParams:
    """Weights of the encoder MLP.  Topology is fixed at construction."""

    weights: list
    biases: list
    latent_dim: int

    @property
    def sizes(self) -> tuple:
        return tuple([self.weights[0].shape[1]] + [w.shape[0] for w in self.weights])

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.latent_dim,
        )


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over latent features."""

    mean: np.ndarray
    var: np.ndarray


def init_params(input_dim: int, latent_dim: int, hidden=(8, 16, 8), rng=None) -> EncoderParams:
    """Fresh encoder weights, uniform in +-sqrt(6 / (fan_in + fan_out))."""
    if rng is None:
        rng = np.random.default_rng()
    if latent_dim < 1 or input_dim < 1:
        raise ConfigError("input_dim and latent_dim must be >= 1")
    sizes = [int(input_dim)] + [int(h) for h in hidden] + [2 * int(latent_dim)]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases, int(latent_dim))


def _elu(h):
    return np.where(h > 0, h, np.expm1(np.minimum(h, 0.0)))


def _elu_grad(h):
    return np.where(h > 0, 1.0, np.exp(np.minimum(h, 0.0)))


def _forward(params: EncoderParams, inputs: np.ndarray):
    """Run the MLP on a (B, input_dim) batch; returns the full activation cache."""
    acts = [inputs]
    pre = []
    h = inputs
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if not np.all(np.isfinite(h)):
            raise NumericFailure(f"encoder layer {i + 1} produced non-finite values")
        pre.append(h)
        if i < n_layers - 1:
            h = _elu(h)
            acts.append(h)
    ell = params.latent_dim
    mu = pre[-1][:, :ell]
    logvar_raw = pre[-1][:, ell:]
    logvar = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
    return acts, pre, mu, logvar_raw, logvar


def encode(params: EncoderParams, x, u) -> LatentGaussian:
    """Latent Gaussian for one (state, control) pair."""
    x = as_vector(x, name="x")
    u = as_vector(u, name="u")
    inp = np.concatenate([x, u])
    if inp.shape[0] != params.input_dim:
        raise DimensionError(
            f"encoder expects input of length {params.input_dim}, got {inp.shape[0]}"
        )
    _, _, mu, _, logvar = _forward(params, inp[None, :])
    return LatentGaussian(mean=mu[0].copy(), var=np.exp(logvar[0]))


def encode_batch(params: EncoderParams, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized encode over a (B, input_dim) matrix; returns (means, vars)."""
    inputs = as_matrix(inputs, shape=(None, params.input_dim), name="inputs")
    _, _, mu, _, logvar = _forward(params, inputs)
    return mu, np.exp(logvar)


def kl_to_standard_normal(g: LatentGaussian) -> float:
    """KL(q || N(0, I)) for a diagonal Gaussian; zero iff q is standard normal."""
    mean = as_vector(g.mean, name="mean")
    var = as_vector(g.var, n=mean.shape[0], name="var")
    if np.any(var <= 0):
        raise ConfigError("latent variances must be positive")
    return float(0.5 * np.sum(mean**2 + var - np.log(var) - 1.0))


def sample_latent(g: LatentGaussian, unit_noise) -> np.ndarray:
    """Reparameterized draw mean + sqrt(var) * unit_noise."""
    mean = as_vector(g.mean, name="mean")
    noise = as_vector(unit_noise, n=mean.shape[0], name="unit_noise")
    return mean + np.sqrt(g.var) * noise


def variational_loss(
    params: EncoderParams,
    theta0: np.ndarray,
    inputs: np.ndarray,
    targets: np.ndarray,
    noise: np.ndarray,
    kl_weight: float,
    deterministic: bool = False,
):
    """Loss and exact gradients over one batch.

    Returns (loss, grads, stats) where grads is a list aligned with
    [W1, b1, ..., W4, b4, theta0] and stats carries the reconstruction and KL
    parts separately.  In deterministic mode the sample is the mean and the
    KL term is dropped entirely.
    """
    inputs = as_matrix(inputs, name="inputs")
    targets = as_matrix(targets, shape=(inputs.shape[0], None), name="targets")
    ell = params.latent_dim
    noise = as_matrix(noise, shape=(inputs.shape[0], ell), name="noise")

    acts, pre, mu, logvar_raw, logvar = _forward(params, inputs)
    var = np.exp(logvar)
    sd = np.exp(0.5 * logvar)

    z = mu if deterministic else mu + sd * noise
    resid = targets - z @ theta0.T
    data_loss = float(np.sum(resid * resid))
    if deterministic:
        kl_sum = 0.0
    else:
        kl_sum = float(0.5 * np.sum(mu**2 + var - logvar - 1.0))
    loss = data_loss + kl_weight * kl_sum
    if not np.isfinite(loss):
        bad = np.nonzero(~np.isfinite(np.sum(resid, axis=1)))[0]
        idx = int(bad[0]) if bad.size else 0
        raise NumericFailure(f"non-finite loss contribution at sample {idx}")

    d_z = -2.0 * resid @ theta0
    d_theta0 = -2.0 * resid.T @ z
    if deterministic:
        d_mu = d_z
        d_logvar = np.zeros_like(logvar)
    else:
        d_mu = d_z + kl_weight * mu
        d_logvar = 0.5 * d_z * noise * sd + kl_weight * 0.5 * (var - 1.0)
    clip_mask = (logvar_raw > LOGVAR_MIN) & (logvar_raw < LOGVAR_MAX)
    d_head = np.hstack([d_mu, d_logvar * clip_mask])

    grads = [None] * (2 * len(params.weights)) + [d_theta0]
    d_h = d_head
    for i in range(len(params.weights) - 1, -1, -1):
        grads[2 * i] = d_h.T @ acts[i]
        grads[2 * i + 1] = d_h.sum(axis=0)
        if i > 0:
            d_h = (d_h @ params.weights[i]) * _elu_grad(pre[i - 1])

    stats = {"data": data_loss, "kl": kl_sum}
    return loss, grads, stats


def _param_list(params: EncoderParams, theta0: np.ndarray) -> list:
    out = []
    for W, b in zip(params.weights, params.biases):
        out.extend([W, b])
    out.append(theta0)
    return out


def flatten_params(params: EncoderParams, theta0: np.ndarray) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _param_list(params, theta0)])


def set_flat_params(params: EncoderParams, theta0: np.ndarray, flat: np.ndarray) -> None:
    """Write a flat vector back into the parameter arrays in place."""
    offset = 0
    for arr in _param_list(params, theta0):
        n = arr.size
        arr.ravel()[:] = flat[offset : offset + n]
        offset += n
    if offset != flat.size:
        raise DimensionError("flat parameter vector has the wrong length")


@dataclass
class OfflineTrainConfig:
    """Hyperparameters of the offline fit."""

    latent_dim: int = 2
    hidden: tuple = (8, 16, 8)
    kl_weight: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    deterministic: bool = False
    divergence_factor: float = 1e3


def train_offline(inputs, targets, cfg: OfflineTrainConfig):
    """Fit encoder and linear decoder jointly with minibatch Adam.

    inputs is the (n, d + m) matrix of concatenated states and controls,
    targets the (n, d) residual matrix.  Returns (params, theta0, history)
    where history holds the per-epoch mean loss.  Raises TrainingDiverged if
    any batch loss exceeds divergence_factor times the initial full-data loss.
    """
    inputs = as_matrix(inputs, name="inputs")
    targets = as_matrix(targets, shape=(inputs.shape[0], None), name="targets")
    n = inputs.shape[0]
    if cfg.batch_size < 1 or cfg.epochs < 1:
        raise ConfigError("batch_size and epochs must be >= 1")

    # Precondition: train on standardized inputs and unit-variance targets so
    # the reconstruction term is O(1) per sample regardless of residual scale
    # (raw one-step residuals can sit orders of magnitude below the KL weight,
    # which otherwise collapses the latent space).  Both scalings are folded
    # back into the first layer and the decoder below, so callers see a model
    # in raw units.
    in_mean = inputs.mean(axis=0)
    in_sd = np.maximum(inputs.std(axis=0), 1e-8)
    tg_sd = np.maximum(targets.std(axis=0), 1e-8)
    inputs = (inputs - in_mean) / in_sd
    targets = targets / tg_sd

    rng = np.random.default_rng(cfg.seed)
    params = init_params(inputs.shape[1], cfg.latent_dim, cfg.hidden, rng)
    ell, d = cfg.latent_dim, targets.shape[1]
    a = np.sqrt(6.0 / (ell + d))
    theta0 = rng.uniform(-a, a, size=(d, ell))

    noise0 = rng.standard_normal((n, ell))
    loss0, _, _ = variational_loss(
        params, theta0, inputs, targets, noise0, cfg.kl_weight, cfg.deterministic
    )
    guard = cfg.divergence_factor * max(loss0 / n, 1e-12)

    flat = flatten_params(params, theta0)
    m1 = np.zeros_like(flat)
    m2 = np.zeros_like(flat)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0

    history = []
    for _epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            noise = rng.standard_normal((idx.size, ell))
            loss, grads, _ = variational_loss(
                params, theta0, inputs[idx], targets[idx], noise, cfg.kl_weight, cfg.deterministic
            )
            if not np.isfinite(loss) or loss / idx.size > guard:
                raise TrainingDiverged(
                    f"batch loss {loss / idx.size:.3g} exceeded {guard:.3g}"
                )
            epoch_loss += loss
            g = np.concatenate([a_.ravel() for a_ in grads])
            t += 1
            m1 = beta1 * m1 + (1 - beta1) * g
            m2 = beta2 * m2 + (1 - beta2) * g * g
            m1_hat = m1 / (1 - beta1**t)
            m2_hat = m2 / (1 - beta2**t)
            flat = flat - cfg.learning_rate * m1_hat / (np.sqrt(m2_hat) + eps)
            set_flat_params(params, theta0, flat)
        history.append(epoch_loss / n)

    # Fold the preconditioning into the weights: the first layer absorbs the
    # input standardization exactly, the decoder rows absorb the target scale.
    params.weights[0] = params.weights[0] / in_sd[None, :]
    params.biases[0] = params.biases[0] - params.weights[0] @ in_mean
    theta0 = theta0 * tg_sd[:, None]
    return params, theta0, history


def save_model(path, params: EncoderParams, theta0: np.ndarray, state_dim: int, control_dim: int):
    """Persist topology, encoder weights (layer order), decoder (row-major)."""
    blob = {
        "activation": "elu",
        "hidden": list(params.sizes[1:-1]),
        "latent_dim": params.latent_dim,
        "state_dim": int(state_dim),
        "control_dim": int(control_dim),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "decoder": np.asarray(theta0).tolist(),
    }
    with open(path, "w") as fh:
        json.dump(blob, fh)


def load_model(path):
    """Inverse of save_model; returns (params, theta0, meta)."""
    with open(path) as fh:
        blob = json.load(fh)
    weights = [np.array(w, dtype=np.float64) for w in blob["weights"]]
    biases = [np.array(b, dtype=np.float64) for b in blob["biases"]]
    params = EncoderParams(weights, biases, int(blob["latent_dim"]))
    theta0 = np.array(blob["decoder"], dtype=np.float64)
    meta = {"state_dim": int(blob["state_dim"]), "control_dim": int(blob["control_dim"])}
    return params, theta0, meta


class ResidualEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade over the offline trainer.

    fit(X, y) expects X = concatenated (state, control) rows and y = one-step
    residual targets.  transform returns latent feature means; predict returns
    decoded residual estimates theta0 z.
    """

    def __init__(
        self,
        latent_dim: int = 2,
        hidden: tuple = (8, 16, 8),
        kl_weight: float = 0.1,
        learning_rate: float = 1e-3,
        batch_size: int = 128,
        epochs: int = 50,
        random_state: int = 0,
        deterministic: bool = False,
    ):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.kl_weight = kl_weight
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.deterministic = deterministic

    def _config(self) -> OfflineTrainConfig:
        return OfflineTrainConfig(
            latent_dim=self.latent_dim,
            hidden=tuple(self.hidden),
            kl_weight=self.kl_weight,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.random_state,
            deterministic=self.deterministic,
        )

    def fit(self, X, y):
        X = as_matrix(X, name="X")
        y = as_matrix(y, shape=(X.shape[0], None), name="y")
        self.params_, self.decoder_, self.loss_curve_ = train_offline(X, y, self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("ResidualEncoder is not fitted yet; call fit first")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        mu, _ = encode_batch(self.params_, as_matrix(X, shape=(None, self.n_features_in_)))
        return mu

    def transform_dist(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Latent means and variances, for callers that need the uncertainty."""
        self._check_fitted()
        return encode_batch(self.params_, as_matrix(X, shape=(None, self.n_features_in_)))

    def predict(self, X) -> np.ndarray:
        self._check_fitted()
        return self.transform(X) @ self.decoder_.T
