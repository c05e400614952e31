"""Synthetic tasks, their closed-form oracles and the training harness."""

from .generators import (
    gen_anomaly_toy,
    gen_kabsch,
    gen_linreg2d,
    gen_policy,
    gen_scaling,
    gen_sine,
    random_similarity,
)
from .metrics import DEGENERATE, accuracy, mse, pearson_r
from .train import Batch, RunRecord, TaskSpec, eval_accuracy, eval_mse, sample_batch, train

__all__ = [
    "Batch", "DEGENERATE", "RunRecord", "TaskSpec", "accuracy", "eval_accuracy", "eval_mse",
    "gen_anomaly_toy", "gen_kabsch", "gen_linreg2d", "gen_policy", "gen_scaling", "gen_sine",
    "mse", "pearson_r", "random_similarity", "sample_batch", "train",
]
