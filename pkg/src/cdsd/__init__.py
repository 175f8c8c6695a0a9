"""Causal discovery with single-parent decoding for multivariate time series.

Learns a latent representation in which every observed variable descends
from a single latent, together with a lagged binary causal graph over the
latents, by maximizing a constrained variational objective. Ships with a
ground-truth synthetic benchmark generator, recovery metrics, and a
PCA/Varimax comparison pipeline. See the `cdsd` command line tool for the
end-to-end workflow.
"""

from .graphs import GraphSample, binarize, edge_probs, sample_st, sparsity_penalty
from .metrics import EvalReport, mcc, score_recovery, shd, w_abs_error
from .model import (
    ModelConfig,
    ModelParams,
    Window,
    default_model_config,
    elbo_window,
    encode,
    encode_series,
    gaussian_kl,
    init_params,
)
from .synthetic import Dataset, GenConfig, GroundTruth, generate_dataset
from .training import AlmState, DivergenceError, TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AlmState",
    "Dataset",
    "DivergenceError",
    "EvalReport",
    "GenConfig",
    "GraphSample",
    "GroundTruth",
    "ModelConfig",
    "ModelParams",
    "TrainConfig",
    "TrainResult",
    "Window",
    "binarize",
    "default_model_config",
    "edge_probs",
    "elbo_window",
    "encode",
    "encode_series",
    "gaussian_kl",
    "generate_dataset",
    "init_params",
    "mcc",
    "sample_st",
    "score_recovery",
    "shd",
    "sparsity_penalty",
    "train",
    "w_abs_error",
]
