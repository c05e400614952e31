"""Intention, the closed-form least-squares KVQ operator, with its solver family,
a small batched autodiff, stacked blocks, synthetic tasks and benchmarks."""

from .kvq import (AlphaSpec, KernelSpec, KvqBatch, ModuleSpec, attention, intention, intention_auto,
                  intention_dual, linear_attention, sigma_intention)
from .linalg import ContractError, DimensionError, NotPositiveDefinite, RngStream

__version__ = "0.1.0"

__all__ = [
    "AlphaSpec", "ContractError", "DimensionError", "KernelSpec", "KvqBatch", "ModuleSpec",
    "NotPositiveDefinite", "RngStream", "attention", "intention", "intention_auto", "intention_dual",
    "linear_attention", "sigma_intention",
]
