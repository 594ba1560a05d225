"""Changepoint-aware online Bayesian adaptation for residual dynamics models."""

from .adapt import (
    AdaptConfig,
    Beam,
    ChangepointRegressor,
    DecoderPosterior,
    Hypothesis,
    beam_from_json,
    beam_step,
    beam_to_json,
    beam_weights,
    changepoint_posterior,
    init_beam,
    marginal_decoder,
    marginal_loglik,
    posterior_update,
    predict,
    predict_batch,
    score_update,
    temper_factor,
    top_hypothesis,
    total_variance,
)
from .data import Dataset, Transition, residuals
from .diagnostics import GramianTracker
from .encoder import (
    EncoderParams,
    LatentGaussian,
    OfflineTrainConfig,
    ResidualEncoder,
    encode,
    encode_batch,
    kl_to_standard_normal,
    sample_latent,
    train_offline,
    variational_loss,
)
from .validation import (
    ConfigError,
    DimensionError,
    NumericFailure,
    SimulationBlowUp,
    TrainingDiverged,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "Beam",
    "ChangepointRegressor",
    "ConfigError",
    "Dataset",
    "DecoderPosterior",
    "DimensionError",
    "EncoderParams",
    "GramianTracker",
    "Hypothesis",
    "LatentGaussian",
    "NumericFailure",
    "OfflineTrainConfig",
    "ResidualEncoder",
    "SimulationBlowUp",
    "TrainingDiverged",
    "Transition",
    "beam_from_json",
    "beam_step",
    "beam_to_json",
    "beam_weights",
    "changepoint_posterior",
    "encode",
    "encode_batch",
    "init_beam",
    "kl_to_standard_normal",
    "marginal_decoder",
    "marginal_loglik",
    "posterior_update",
    "predict",
    "predict_batch",
    "residuals",
    "sample_latent",
    "score_update",
    "temper_factor",
    "top_hypothesis",
    "total_variance",
    "train_offline",
    "variational_loss",
]
