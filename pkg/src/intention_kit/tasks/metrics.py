from __future__ import annotations

import math

import numpy as np

from ..linalg import ContractError

DEGENERATE = math.nan  # Pearson r of a constant input


def pearson_r(x, y) -> float:
    """Sample correlation; :data:`DEGENERATE` (NaN) when either input is constant."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError("inputs must have equal length")
    if x.size < 2:
        raise ContractError("need at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(xc @ xc)), math.sqrt(float(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        return DEGENERATE
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    return float(np.mean((pred - target) ** 2))


def accuracy(logits, labels) -> float:
    """Argmax accuracy over the last axis; ties go to the lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    logits = logits.reshape(-1, logits.shape[-1])
    labels = np.asarray(labels).ravel()
    return float(np.mean(np.argmax(logits, axis=1) == labels))
