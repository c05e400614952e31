"""Closed-form baselines for the synthetic tasks."""

from __future__ import annotations

import numpy as np


def trilaterate(obs: np.ndarray) -> np.ndarray:
    """Recover the target from rows (x, y, ‖(x, y) − t‖²).

    x² + y² − d = 2x·tₓ + 2y·t_y − ‖t‖² is linear in (tₓ, t_y, ‖t‖²), so a
    least-squares fit on [x, y, 1] returns 2t in its first two coefficients.
    """
    obs = np.asarray(obs, dtype=np.float64)
    x, y, d = obs[:, 0], obs[:, 1], obs[:, 2]
    A = np.column_stack([x, y, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, x ** 2 + y ** 2 - d, rcond=None)
    return coef[:2] / 2.0


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Least-squares similarity transform dst ≈ s·R·src + t."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    sc, dc = src - mu_s, dst - mu_d
    cov = dc.T @ sc / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(src.shape[1])
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[-1, -1] = -1.0
    R = U @ D @ Vt
    var = (sc ** 2).sum() / len(src)
    s = float(np.trace(np.diag(S) @ D) / var)
    t = mu_d - s * R @ mu_s
    return s, R, t


def umeyama_predict(K, V, Q) -> np.ndarray:
    s, R, t = umeyama(K, V)
    return s * np.asarray(Q) @ R.T + t


def loo_centroid_outlier(X: np.ndarray) -> int:
    """Row farthest from the centroid of the remaining rows."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    total = X.sum(0)
    loo = (total[None, :] - X) / (n - 1)
    return int(np.argmax(((X - loo) ** 2).sum(1)))


def nearest_centroid_outlier(X: np.ndarray) -> int:
    """Row farthest from the centroid of all rows."""
    X = np.asarray(X, dtype=np.float64)
    return int(np.argmax(((X - X.mean(0)) ** 2).sum(1)))
