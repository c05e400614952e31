"""Synthetic task generators. All randomness comes from the passed stream."""

from __future__ import annotations

import math

import numpy as np

from ..kvq import KvqBatch
from ..linalg import ContractError, RngStream

# Used as a linear map on standard normal draws; as a covariance it is indefinite.
LINREG_SKEW = np.array([[0.7, 0.9], [0.9, 1.0]])


def gen_linreg2d(rng: RngStream, N: int = 20, M_in: int = 400, M_ex: int = 400) -> tuple[KvqBatch, KvqBatch]:
    """Noiseless 2-D linear regression: interpolation and extrapolation batches."""
    if min(N, M_in, M_ex) < 1:
        raise ContractError("counts must be >= 1")
    g = rng.generator
    w = math.sqrt(10.0) * g.standard_normal((2, 1))
    K = g.standard_normal((N, 2)) @ LINREG_SKEW
    V = K @ w
    Q_in = g.uniform(-1.0, 1.0, size=(M_in, 2))
    Q_ex = g.uniform(-25.0, 25.0, size=(M_ex, 2))
    return KvqBatch(K, V, Q_in, Q_in @ w), KvqBatch(K, V, Q_ex, Q_ex @ w)


def gen_scaling(rng: RngStream, d: int, N: int = 10) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """x (N×d), y = xW (N×1) and the target W (d×1)."""
    if d < 1:
        raise ContractError("d must be >= 1")
    g = rng.generator
    W = g.standard_normal((d, 1))
    x = g.standard_normal((N, d))
    return x, x @ W, W


def gen_sine(rng: RngStream, N: int = 10, M: int = 200) -> KvqBatch:
    """y = a·sin(x − b) on M query points; N of them form the context."""
    if N > M:
        raise ContractError("context must be a subset of the queries")
    g = rng.generator
    b = g.uniform(0.0, math.pi)
    a = g.uniform(0.1, 5.0)
    xq = g.uniform(-6.0, 6.0, size=(M, 1))
    yq = a * np.sin(xq - b)
    idx = g.choice(M, size=N, replace=False)
    return KvqBatch(xq[idx], yq[idx], xq, yq)


def gen_policy(rng: RngStream, n_obs: int = 5, noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Observations (x, y, squared distance to target) and the 2-D target.

    ``noise`` adds Gaussian noise of that standard deviation to the distances.
    """
    if noise < 0:
        raise ContractError("noise must be non-negative")
    g = rng.generator
    t = g.standard_normal(2)
    xy = 0.5 * g.standard_normal((n_obs, 2))
    dist = np.sum((xy - t) ** 2, axis=1, keepdims=True)
    if noise:
        dist = dist + noise * g.standard_normal(dist.shape)
    return np.hstack([xy, dist]), t


def random_similarity(rng: RngStream) -> tuple[float, np.ndarray, np.ndarray]:
    g = rng.generator
    scale = g.uniform(0.5, 2.0)
    angle = g.uniform(-math.pi, math.pi)
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    shift = g.standard_normal(2)
    return scale, R, shift


def gen_kabsch(rng: RngStream, N: int = 5, M: int = 5, noise: float = 0.0,
               transform=None) -> KvqBatch:
    """V = a·R·K + w + ε; targets are the noiseless map applied to Q."""
    if noise < 0:
        raise ContractError("noise must be non-negative")
    g = rng.generator
    scale, R, shift = transform if transform is not None else random_similarity(rng)
    K = g.standard_normal((N, 2))
    Q = g.standard_normal((M, 2))
    V = scale * K @ R.T + shift + noise * g.standard_normal((N, 2))
    return KvqBatch(K, V, Q, scale * Q @ R.T + shift)


def gen_anomaly_toy(rng: RngStream, set_size: int = 10, embed_dim: int = 32,
                    class_sep: float = 6.0) -> tuple[np.ndarray, int]:
    """One outlier among ``set_size`` points drawn from isotropic Gaussian clusters.

    σ is the RMS radius of a cluster (per-coordinate std σ/√embed_dim, σ = 1),
    so the difficulty at a given ``class_sep`` does not depend on the
    dimension. The outlier's cluster mean sits ``class_sep``·σ away in a random
    direction. Returns (rows, outlier index).
    """
    if not class_sep >= 0:
        raise ContractError("class_sep must be non-negative")
    if set_size < 2:
        raise ContractError("set_size must be >= 2")
    g = rng.generator
    centre = g.standard_normal(embed_dim)
    u = g.standard_normal(embed_dim)
    u /= np.linalg.norm(u)
    X = centre + g.standard_normal((set_size, embed_dim)) / math.sqrt(embed_dim)
    pos = int(g.integers(set_size))
    X[pos] += class_sep * u
    return X, pos
