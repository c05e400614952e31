"""Closed-form linear solvers that all reduce to w = Σ_m⁻¹ Xᵀ y_m.

Ridge, weighted ridge, LS-SVM, LDA and QDA differ only in the summary
matrix Σ_m and the relabelling y_m. :func:`solver_system` builds that pair
and :func:`fit_generic` solves it; the named ``*_fit`` functions take their
own route and are tested against the generic one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import ContractError, DimensionError, NotPositiveDefinite, as_matrix, pinv, solve_spd

log = logging.getLogger(__name__)

SOLVER_KINDS = ("ridge", "weighted-ridge", "ls-svm", "lda", "qda")
VIOLATION_TOL = 1e-12


@dataclass(frozen=True)
class LabeledData:
    X: np.ndarray
    y: np.ndarray
    weights: Optional[np.ndarray] = None
    bias_index: Optional[int] = None

    def __post_init__(self):
        X = as_matrix(self.X, "X")
        y = np.asarray(self.y, dtype=np.float64).ravel()
        if y.shape[0] != X.shape[0]:
            raise DimensionError(f"{y.shape[0]} labels for {X.shape[0]} rows")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if w.shape[0] != X.shape[0]:
                raise DimensionError(f"{w.shape[0]} weights for {X.shape[0]} rows")
            object.__setattr__(self, "weights", w)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def _solve(sigma: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=np.float64)
    if not np.any(sigma):
        # zero scatter: no covariance information, fall back to the raw direction
        return rhs
    col = rhs.reshape(rhs.shape[0], -1)
    try:
        out = solve_spd(sigma, col)
    except NotPositiveDefinite:
        out = pinv(sigma) @ col
    return out.reshape(rhs.shape)


def _binary(y: np.ndarray) -> np.ndarray:
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be 0 or 1")
    return y


def _class_counts(y: np.ndarray) -> tuple[int, int]:
    n1 = int(np.sum(y == 1))
    n0 = int(np.sum(y == 0))
    if n0 == 0 or n1 == 0:
        raise ContractError("both classes must be present")
    return n0, n1


def discriminant_relabel(y) -> np.ndarray:
    """Labels with Xᵀy_m = μ₁ − μ₀: 1/N¹ for class 1, −1/N⁰ for class 0."""
    y = _binary(np.asarray(y, dtype=np.float64).ravel())
    n0, n1 = _class_counts(y)
    return y / n1 - (1.0 - y) / n0


def _check_C(C: float):
    if C < 0:
        raise ContractError("C must be non-negative")


def _bias_penalty(data: LabeledData, C: float) -> np.ndarray:
    if data.bias_index is None:
        raise ContractError("LS-SVM needs a declared bias column index")
    j = data.bias_index
    if not 0 <= j < data.d or not np.all(data.X[:, j] == 1.0):
        raise ContractError(f"column {j} is not a column of ones")
    pen = np.full(data.d, float(C))
    pen[j] = 0.0
    return np.diag(pen)


def within_class_scatter(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Σ_k (Xᵏ − X̄ᵏ)ᵀ(Xᵏ − X̄ᵏ), unnormalised."""
    total = np.zeros((X.shape[1], X.shape[1]))
    for label in (0, 1):
        Xk = X[y == label]
        if len(Xk):
            Xc = Xk - Xk.mean(axis=0)
            total += Xc.T @ Xc
    return total


def total_scatter(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc


def solver_system(kind: str, data: LabeledData, C: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(Σ_m, X, y_m)`` so that the solution is ``Σ_m⁻¹ Xᵀ y_m``."""
    X, y = data.X, data.y
    if kind == "ridge":
        _check_C(C)
        return X.T @ X + C * np.eye(data.d), X, y
    if kind == "weighted-ridge":
        _check_C(C)
        if data.weights is None:
            raise ContractError("weighted ridge needs sample weights")
        if np.any(data.weights < 0):
            raise ContractError("sample weights must be non-negative")
        root = np.sqrt(data.weights)
        Xz = X * root[:, None]
        return Xz.T @ Xz + C * np.eye(data.d), Xz, root * y
    if kind == "ls-svm":
        _check_C(C)
        return X.T @ X + _bias_penalty(data, C), X, 2.0 * _binary(y) - 1.0
    if kind == "lda":
        y_m = discriminant_relabel(y)
        return total_scatter(X), X, y_m
    if kind == "qda":
        y_m = discriminant_relabel(y)
        return within_class_scatter(X, y), X, y_m
    raise ContractError(f"unknown solver kind {kind!r}")


def fit_generic(kind: str, data: LabeledData, C: float = 0.0) -> np.ndarray:
    sigma, X, y_m = solver_system(kind, data, C)
    return _solve(sigma, X.T @ y_m)


def ridge_fit(data: LabeledData, C: float = 0.0) -> np.ndarray:
    """(XᵀX + CI)⁻¹Xᵀy through the SVD of X (minimum norm when C = 0)."""
    _check_C(C)
    U, s, Vt = np.linalg.svd(data.X, full_matrices=False)
    cutoff = 1e-10 * s.max(initial=0.0)
    denom = s ** 2 + C
    factor = np.where((s > cutoff) & (denom > 0), s / np.where(denom > 0, denom, 1.0), 0.0)
    return Vt.T @ (factor * (U.T @ data.y))


def weighted_ridge_fit(data: LabeledData, C: float = 0.0) -> np.ndarray:
    """(XᵀWX + CI)⁻¹XᵀWy with W = diag(weights)."""
    if data.weights is None:
        raise ContractError("weighted ridge needs sample weights")
    if np.any(data.weights < 0):
        raise ContractError("sample weights must be non-negative")
    root = np.sqrt(data.weights)
    return ridge_fit(LabeledData(data.X * root[:, None], root * data.y), C)


def lssvm_fit(data: LabeledData, C: float = 0.0) -> np.ndarray:
    """Ridge on ±1 labels with the bias column left unpenalised."""
    pen = _bias_penalty(data, C)
    _check_C(C)
    y_pm = 2.0 * _binary(data.y) - 1.0
    X = data.X
    return _solve(X.T @ X + pen, X.T @ y_pm)


def lda_fit(data: LabeledData) -> np.ndarray:
    """Total-scatter discriminant direction Σ⁻¹(μ₁ − μ₀)."""
    y = _binary(data.y)
    _class_counts(y)
    mu1 = data.X[y == 1].mean(axis=0)
    mu0 = data.X[y == 0].mean(axis=0)
    return _solve(total_scatter(data.X), mu1 - mu0)


def qda_fit(data: LabeledData) -> np.ndarray:
    """Pooled within-class scatter discriminant direction (a linear w)."""
    y = _binary(data.y)
    _class_counts(y)
    mu1 = data.X[y == 1].mean(axis=0)
    mu0 = data.X[y == 0].mean(axis=0)
    return _solve(within_class_scatter(data.X, y), mu1 - mu0)


def fit(kind: str, data: LabeledData, C: float = 0.0) -> np.ndarray:
    if kind == "ridge":
        return ridge_fit(data, C)
    if kind == "weighted-ridge":
        return weighted_ridge_fit(data, C)
    if kind == "ls-svm":
        return lssvm_fit(data, C)
    if kind == "lda":
        return lda_fit(data)
    if kind == "qda":
        return qda_fit(data)
    raise ContractError(f"unknown solver kind {kind!r}")


def violated_constraints(w, C, c, tol: float = VIOLATION_TOL) -> np.ndarray:
    """Indices of columns of ``C`` with Cᵢᵀw < cᵢ − tol."""
    w = np.asarray(w, dtype=np.float64).ravel()
    C = as_matrix(C, "C")
    c = np.asarray(c, dtype=np.float64).ravel()
    if C.shape[0] != w.shape[0] or C.shape[1] != c.shape[0]:
        raise DimensionError(f"constraints {C.shape} / {c.shape} vs w {w.shape}")
    return np.flatnonzero(C.T @ w < c - tol)


def constrained_project(w_star, Z, C, c) -> np.ndarray:
    """One-shot correction onto the constraints Cᵀw ≥ c that ``w_star`` violates.

    ``Z`` is the inverse covariance (KᵀK)⁻¹ defining the metric. When nothing
    is violated ``w_star`` is returned unchanged. Constraints broken anew by
    the projection are logged, not fixed.
    """
    w_star = np.asarray(w_star, dtype=np.float64).ravel()
    Z = as_matrix(Z, "Z")
    C = as_matrix(C, "C")
    c = np.asarray(c, dtype=np.float64).ravel()
    idx = violated_constraints(w_star, C, c)
    if idx.size == 0:
        return w_star
    Cb, cb = C[:, idx], c[idx]
    gram = Cb.T @ Z @ Cb
    try:
        step = solve_spd(gram, (Cb.T @ w_star - cb)[:, None])
    except NotPositiveDefinite:
        step = pinv(gram) @ (Cb.T @ w_star - cb)[:, None]
    w = w_star - (Z @ Cb @ step).ravel()
    again = np.setdiff1d(violated_constraints(w, C, c, tol=1e-9), idx)
    if again.size:
        log.warning("projection violates constraints %s", again.tolist())
    return w
