"""Online changepoint-aware Bayesian adaptation of a linear residual decoder.

The residual model is delta = theta z + noise with a Gaussian posterior over
theta maintained per output dimension.  At every step a latent binary decision
says whether the environment just changed; a change tempers the posterior
(flattens it toward its own shape, precision scaled by temper^2) before the
conjugate update, so the model can relearn quickly without forgetting its
structure.  Since the decision sequence is unobserved, a beam of the top-K
most plausible decision histories is carried, each with its own posterior and
accumulated log-score, and predictions marginalize over the beam.

All per-step linear algebra is batched across hypotheses, branches, and
output dimensions into single Cholesky factorizations, which keeps the cost
essentially flat in the beam size.
"""

from __future__ import annotations

from dataclasses import dataclass

import json
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .validation import (
    ConfigError,
    DimensionError,
    NumericFailure,
    as_matrix,
    as_vector,
    check_positive,
    check_unit_interval,
)

SCORE_OFFSET_PERIOD = 10_000


@dataclass
class AdaptConfig:
    """Shared knobs of the online adapter.

    beam_size: number of decision histories kept alive.
    changepoint_prior: per-step prior probability of a change.
    temper: forgetting strength in (0, 1]; a change scales the posterior
        precision by temper^2.
    prior_scale: initial parameter variance (isotropic) around the offline
        decoder.
    noise_var: fixed per-output observation noise variance (scalar broadcasts).
    """

    beam_size: int = 5
    changepoint_prior: float = 0.05
    temper: float = 0.9
    prior_scale: float = 0.1
    noise_var: float | np.ndarray = 0.1

    def validate(self) -> "AdaptConfig":
        if int(self.beam_size) < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        check_unit_interval(self.changepoint_prior, "changepoint_prior")
        temper = float(self.temper)
        if not 0.0 < temper <= 1.0:
            raise ConfigError(f"temper must lie in (0, 1], got {temper}")
        check_positive(self.prior_scale, "prior_scale")
        nv = np.atleast_1d(np.asarray(self.noise_var, dtype=np.float64))
        if np.any(nv <= 0) or not np.all(np.isfinite(nv)):
            raise ConfigError("noise_var entries must be positive and finite")
        return self


@dataclass
class DecoderPosterior:
    """Independent Gaussian posteriors over each row of the decoder.

    means has shape (d, ell); covs has shape (d, ell, ell), one SPD matrix
    per output dimension.
    """

    means: np.ndarray
    covs: np.ndarray

    def copy(self) -> "DecoderPosterior":
        return DecoderPosterior(self.means.copy(), self.covs.copy())


@dataclass
class Hypothesis:
    """One decision history: its changepoint steps, log-score, and posterior."""

    score: float
    changepoints: tuple
    posterior: DecoderPosterior


class Beam:
    """Top-K hypotheses plus the shared configuration and step counter."""

    def __init__(self, hypotheses, config: AdaptConfig, noise_var: np.ndarray, step: int = 0):
        self.hypotheses = list(hypotheses)
        self.config = config
        self.noise_var = noise_var
        self.step = int(step)

    @property
    def latent_dim(self) -> int:
        return self.hypotheses[0].posterior.means.shape[1]

    @property
    def output_dim(self) -> int:
        return self.hypotheses[0].posterior.means.shape[0]

    def __len__(self) -> int:
        return len(self.hypotheses)


def init_beam(theta0, cfg: AdaptConfig) -> Beam:
    """Single-hypothesis beam centered on the offline decoder."""
    cfg.validate()
    theta0 = as_matrix(theta0, name="theta0")
    d, ell = theta0.shape
    noise_var = np.broadcast_to(
        np.atleast_1d(np.asarray(cfg.noise_var, dtype=np.float64)), (d,)
    ).copy()
    covs = np.broadcast_to(float(cfg.prior_scale) * np.eye(ell), (d, ell, ell)).copy()
    post = DecoderPosterior(means=theta0.copy(), covs=covs)
    return Beam([Hypothesis(0.0, (), post)], cfg, noise_var, step=0)


def temper_factor(c: int, temper: float) -> float:
    """Precision multiplier for one step: 1 without a change, temper^2 with one."""
    if c not in (0, 1):
        raise ConfigError(f"decision must be 0 or 1, got {c}")
    temper = float(temper)
    if not 0.0 < temper <= 1.0:
        raise ConfigError(f"temper must lie in (0, 1], got {temper}")
    return 1.0 if c == 0 else temper * temper


def _spd_inverse(mats: np.ndarray, context: str) -> np.ndarray:
    """Batched SPD inverse with an explicit positive-definiteness check."""
    try:
        np.linalg.cholesky(mats)
    except np.linalg.LinAlgError as exc:
        raise NumericFailure(f"{context}: matrix lost positive definiteness") from exc
    inv = np.linalg.inv(mats)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))


def marginal_loglik(post: DecoderPosterior, z, delta, gamma: float, noise_var) -> float:
    """Log evidence of one observation under the (possibly tempered) posterior.

    Per output j the predictive is N(z' mu_j, z' Sigma_j z / gamma + sigma_j^2);
    the log densities sum over outputs.
    """
    z = as_vector(z, n=post.means.shape[1], name="z")
    delta = as_vector(delta, n=post.means.shape[0], name="delta")
    noise_var = np.broadcast_to(np.atleast_1d(noise_var), (post.means.shape[0],))
    q = np.einsum("dij,i,j->d", post.covs, z, z)
    v = q / float(gamma) + noise_var
    err = delta - post.means @ z
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * v) + err * err / v))


def posterior_update(post: DecoderPosterior, z, delta, gamma: float, noise_var) -> DecoderPosterior:
    """Tempered conjugate update, one rank-one observation per output dimension.

    New precision = gamma * old precision + z z' / sigma_j^2; the mean update
    reuses the same factorization.  Raises NumericFailure if a covariance is
    no longer SPD.
    """
    d, ell = post.means.shape
    z = as_vector(z, n=ell, name="z")
    delta = as_vector(delta, n=d, name="delta")
    noise_var = np.broadcast_to(np.atleast_1d(noise_var), (d,))
    gamma = float(gamma)

    prec = _spd_inverse(post.covs, "posterior_update")
    zz = np.outer(z, z)
    new_prec = gamma * prec + zz[None, :, :] / noise_var[:, None, None]
    new_covs = _spd_inverse(new_prec, "posterior_update")
    rhs = gamma * np.einsum("dij,dj->di", prec, post.means) + z[None, :] * (delta / noise_var)[:, None]
    new_means = np.einsum("dij,dj->di", new_covs, rhs)
    return DecoderPosterior(means=new_means, covs=new_covs)


def changepoint_posterior(l0: float, l1: float, prior: float) -> float:
    """Probability the current step is a changepoint, given both branch evidences.

    Computed with a max shift so only ratios of the two branch scores matter.
    The result is clamped to the open interval so downstream logs stay finite.
    """
    check_unit_interval(prior, "prior")
    a0 = np.log1p(-prior) + float(l0)
    a1 = np.log(prior) + float(l1)
    m = max(a0, a1)
    w1 = np.exp(a1 - m)
    p = w1 / (w1 + np.exp(a0 - m))
    return float(np.clip(p, 1e-300, 1.0 - 1e-16))


def score_update(score_prev: float, loglik_c: float, p_cp: float, c: int) -> float:
    """Accumulate one step of a hypothesis score: evidence plus decision log-prob."""
    if c not in (0, 1):
        raise ConfigError(f"decision must be 0 or 1, got {c}")
    p = p_cp if c == 1 else 1.0 - p_cp
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"decision probability must lie in (0, 1], got {p}")
    return float(score_prev + loglik_c + np.log(p))


def _stack(beam: Beam):
    means = np.stack([h.posterior.means for h in beam.hypotheses])
    covs = np.stack([h.posterior.covs for h in beam.hypotheses])
    scores = np.array([h.score for h in beam.hypotheses])
    return means, covs, scores


def beam_step(beam: Beam, z, delta, cfg: AdaptConfig | None = None, forced: int | None = None) -> Beam:
    """Advance the beam by one observation; returns the pruned successor beam.

    Every hypothesis is scored on both decisions using its pre-update
    posterior: the no-change branch keeps the posterior, the change branch
    tempers it, and each branch's score gains the branch evidence plus the
    log posterior probability of the decision itself.  The top beam_size of
    the 2K candidates survive (ties break toward no-change, then lower parent
    index) and only the survivors' posteriors are actually updated.

    forced pins the decision to 0 or 1 for every hypothesis, which is the
    prior -> 0 or prior -> 1 limit of the same computation; the decision
    log-prob term is then exactly zero.  Used by the no-changepoint ablation
    and by scheduled-reset stress tests.
    """
    cfg = (cfg or beam.config).validate()
    d, ell = beam.output_dim, beam.latent_dim
    z = as_vector(z, n=ell, name="z")
    delta = as_vector(delta, n=d, name="delta")
    noise_var = beam.noise_var
    beta_sq = temper_factor(1, cfg.temper)

    means, covs, scores = _stack(beam)
    n_hyp = len(beam)

    q = np.einsum("hdij,i,j->hd", covs, z, z)
    pred = np.einsum("hdi,i->hd", means, z)
    err = delta[None, :] - pred
    v0 = q + noise_var[None, :]
    v1 = q / beta_sq + noise_var[None, :]
    l0 = -0.5 * np.sum(np.log(2.0 * np.pi * v0) + err * err / v0, axis=1)
    l1 = -0.5 * np.sum(np.log(2.0 * np.pi * v1) + err * err / v1, axis=1)

    if forced is None:
        a0 = np.log1p(-cfg.changepoint_prior) + l0
        a1 = np.log(cfg.changepoint_prior) + l1
        log_norm = np.logaddexp(a0, a1)
        cand_scores = np.concatenate([scores + l0 + a0 - log_norm, scores + l1 + a1 - log_norm])
        cand_c = np.concatenate([np.zeros(n_hyp, dtype=int), np.ones(n_hyp, dtype=int)])
        cand_parent = np.concatenate([np.arange(n_hyp), np.arange(n_hyp)])
    elif forced in (0, 1):
        cand_scores = scores + (l1 if forced else l0)
        cand_c = np.full(n_hyp, forced, dtype=int)
        cand_parent = np.arange(n_hyp)
    else:
        raise ConfigError(f"forced decision must be None, 0, or 1, got {forced}")

    order = np.lexsort((cand_parent, cand_c, -cand_scores))
    keep = order[: int(cfg.beam_size)]

    sel_parent = cand_parent[keep]
    sel_c = cand_c[keep]
    gammas = np.where(sel_c == 1, beta_sq, 1.0)

    prec = _spd_inverse(covs[sel_parent], "beam_step")
    zz = np.outer(z, z)[None, None, :, :] / noise_var[None, :, None, None]
    new_prec = gammas[:, None, None, None] * prec + zz
    new_covs = _spd_inverse(new_prec, "beam_step")
    rhs = gammas[:, None, None] * np.einsum("sdij,sdj->sdi", prec, means[sel_parent]) + (
        z[None, None, :] * (delta / noise_var)[None, :, None]
    )
    new_means = np.einsum("sdij,sdj->sdi", new_covs, rhs)

    step = beam.step + 1
    new_scores = cand_scores[keep]
    if step % SCORE_OFFSET_PERIOD == 0:
        new_scores = new_scores - np.max(new_scores)

    hypotheses = []
    traces = set()
    for i in range(keep.size):
        parent = beam.hypotheses[sel_parent[i]]
        trace = parent.changepoints + ((step,) if sel_c[i] == 1 else ())
        traces.add(trace)
        post = DecoderPosterior(means=new_means[i], covs=new_covs[i])
        hypotheses.append(Hypothesis(float(new_scores[i]), trace, post))
    if len(traces) != len(hypotheses):
        raise NumericFailure("beam hypotheses collapsed onto identical decision histories")
    return Beam(hypotheses, cfg, noise_var, step=step)


def beam_weights(beam: Beam) -> np.ndarray:
    """Softmax of hypothesis scores, shifted by the max so it never overflows."""
    scores = np.array([h.score for h in beam.hypotheses])
    w = np.exp(scores - np.max(scores))
    return w / np.sum(w)


def top_hypothesis(beam: Beam) -> Hypothesis:
    """Highest-weight hypothesis; beam order already encodes the tie-break."""
    scores = [h.score for h in beam.hypotheses]
    return beam.hypotheses[int(np.argmax(scores))]


def predict(beam: Beam, z, noise_var=None) -> tuple[np.ndarray, np.ndarray]:
    """Beam-marginal residual prediction: mixture mean and total variance per output.

    Each hypothesis contributes N(z' mu_j, z' Sigma_j z + sigma_j^2); the
    mixture variance adds the between-hypothesis disagreement term.
    """
    z = as_vector(z, n=beam.latent_dim, name="z")
    nv = beam.noise_var if noise_var is None else np.broadcast_to(
        np.atleast_1d(noise_var), (beam.output_dim,)
    )
    w = beam_weights(beam)
    means, covs, _ = _stack(beam)
    m = np.einsum("hdi,i->hd", means, z)
    v = np.einsum("hdij,i,j->hd", covs, z, z) + nv[None, :]
    mean = w @ m
    var = w @ v + w @ (m - mean[None, :]) ** 2
    return mean, var


def predict_batch(beam: Beam, Z) -> tuple[np.ndarray, np.ndarray]:
    """predict for every row of Z at the current (frozen) beam state."""
    Z = as_matrix(Z, shape=(None, beam.latent_dim), name="Z")
    w = beam_weights(beam)
    means, covs, _ = _stack(beam)
    m = np.einsum("hdi,bi->bhd", means, Z)
    v = np.einsum("hdij,bi,bj->bhd", covs, Z, Z) + beam.noise_var[None, None, :]
    mean = np.einsum("h,bhd->bd", w, m)
    var = np.einsum("h,bhd->bd", w, v) + np.einsum("h,bhd->bd", w, (m - mean[:, None, :]) ** 2)
    return mean, var


def marginal_decoder(beam: Beam) -> np.ndarray:
    """Beam-weighted mean decoder, shape (d, ell)."""
    w = beam_weights(beam)
    means, _, _ = _stack(beam)
    return np.einsum("h,hdi->di", w, means)


def total_variance(beam: Beam, z, latent_var) -> np.ndarray:
    """Predictive variance of the residual as seen through the stochastic encoder.

    Three contributions per output j: encoder variance pushed through the
    squared decoder means, parameter variance z' Sigma z, and
    between-hypothesis disagreement.  Observation noise is deliberately not
    included; this quantity modulates the controller, which should react to
    model uncertainty, not to irreducible noise.
    """
    z = as_vector(z, n=beam.latent_dim, name="z")
    latent_var = as_vector(latent_var, n=beam.latent_dim, name="latent_var")
    if np.any(latent_var < 0):
        raise ConfigError("latent_var entries must be nonnegative")
    w = beam_weights(beam)
    means, covs, _ = _stack(beam)
    m = np.einsum("hdi,i->hd", means, z)
    mbar = w @ m
    enc = np.einsum("h,hdi->di", w, means**2) @ latent_var
    par = w @ np.einsum("hdij,i,j->hd", covs, z, z)
    spread = w @ (m - mbar[None, :]) ** 2
    return enc + par + spread


def beam_to_json(beam: Beam) -> str:
    """Serialize the full beam; floats round-trip exactly through repr."""
    cfg = beam.config
    blob = {
        "config": {
            "beam_size": int(cfg.beam_size),
            "changepoint_prior": float(cfg.changepoint_prior),
            "temper": float(cfg.temper),
            "prior_scale": float(cfg.prior_scale),
        },
        "noise_var": beam.noise_var.tolist(),
        "step": beam.step,
        "hypotheses": [
            {
                "score": h.score,
                "changepoints": list(h.changepoints),
                "means": h.posterior.means.tolist(),
                "covs": h.posterior.covs.tolist(),
            }
            for h in beam.hypotheses
        ],
    }
    return json.dumps(blob)


def beam_from_json(text: str) -> Beam:
    blob = json.loads(text)
    noise_var = np.array(blob["noise_var"], dtype=np.float64)
    cfg = AdaptConfig(noise_var=noise_var, **blob["config"]).validate()
    hypotheses = []
    for h in blob["hypotheses"]:
        post = DecoderPosterior(
            means=np.array(h["means"], dtype=np.float64),
            covs=np.array(h["covs"], dtype=np.float64),
        )
        hypotheses.append(Hypothesis(float(h["score"]), tuple(h["changepoints"]), post))
    if not hypotheses:
        raise DimensionError("serialized beam holds no hypotheses")
    return Beam(hypotheses, cfg, noise_var, step=int(blob["step"]))


class ChangepointRegressor(BaseEstimator, RegressorMixin):
    """Estimator facade over the beam engine.

    partial_fit consumes one (features, residual) observation at a time;
    fit replays a whole matrix in row order.  predict marginalizes over the
    current beam.  Set detect_changepoints=False for the plain recursive
    Bayesian regression ablation (every decision forced to no-change).
    """

    def __init__(
        self,
        beam_size: int = 5,
        changepoint_prior: float = 0.05,
        temper: float = 0.9,
        prior_scale: float = 0.1,
        noise_var: float = 0.1,
        detect_changepoints: bool = True,
        prior_decoder=None,
    ):
        self.beam_size = beam_size
        self.changepoint_prior = changepoint_prior
        self.temper = temper
        self.prior_scale = prior_scale
        self.noise_var = noise_var
        self.detect_changepoints = detect_changepoints
        self.prior_decoder = prior_decoder

    def _make_config(self) -> AdaptConfig:
        return AdaptConfig(
            beam_size=self.beam_size if self.detect_changepoints else 1,
            changepoint_prior=self.changepoint_prior,
            temper=self.temper,
            prior_scale=self.prior_scale,
            noise_var=self.noise_var,
        )

    def _ensure_beam(self, n_features: int, n_outputs: int):
        if not hasattr(self, "beam_"):
            if self.prior_decoder is not None:
                theta0 = as_matrix(self.prior_decoder, name="prior_decoder")
            else:
                theta0 = np.zeros((n_outputs, n_features))
            self.beam_ = init_beam(theta0, self._make_config())
            self.n_features_in_ = n_features

    def fit(self, X, y):
        X = as_matrix(X, name="X")
        y = as_matrix(y, shape=(X.shape[0], None), name="y")
        if hasattr(self, "beam_"):
            del self.beam_
        self._ensure_beam(X.shape[1], y.shape[1])
        for i in range(X.shape[0]):
            self.partial_fit(X[i], y[i])
        return self

    def partial_fit(self, z, delta):
        z = as_vector(np.asarray(z).ravel(), name="z")
        delta = as_vector(np.asarray(delta).ravel(), name="delta")
        self._ensure_beam(z.shape[0], delta.shape[0])
        forced = None if self.detect_changepoints else 0
        self.beam_ = beam_step(self.beam_, z, delta, forced=forced)
        return self

    def predict(self, X, return_std: bool = False):
        if not hasattr(self, "beam_"):
            raise NotFittedError("ChangepointRegressor has no beam yet; call fit or partial_fit")
        X = as_matrix(X, shape=(None, self.n_features_in_), name="X")
        mean, var = predict_batch(self.beam_, X)
        if return_std:
            return mean, np.sqrt(var)
        return mean

    @property
    def changepoints_(self) -> tuple:
        if not hasattr(self, "beam_"):
            raise NotFittedError("ChangepointRegressor has no beam yet; call fit or partial_fit")
        return top_hypothesis(self.beam_).changepoints
