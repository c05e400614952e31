"""Dense float64 linear algebra, seeded sampling and matrix (de)serialization.

Every other module goes through these helpers so that the pseudoinverse
cutoffs and the finite-value checks are applied in one place.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, cho_factor, cho_solve

Matrix = NDArray[np.float64]

DEFAULT_RTOL = 1e-10
DEFAULT_EIG_FLOOR = 1e-10
SYMMETRY_TOL = 1e-8


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class NotPositiveDefinite(LinAlgError):
    """Symmetric factorization failed; callers fall back to :func:`pinv`."""


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    check_finite(m, name)
    return m


def check_finite(a: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains NaN or Inf")
    return a


def _is_symmetric(a: np.ndarray, tol: float = SYMMETRY_TOL) -> bool:
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    return bool(np.max(np.abs(a - a.swapaxes(-1, -2)), initial=0.0) <= tol * scale)


def matmul(a, b) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b)


def solve_spd(a, b) -> Matrix:
    """Solve ``a x = b`` for symmetric positive definite ``a`` via Cholesky.

    Raises :class:`NotPositiveDefinite` when the factorization fails or the
    factor is numerically singular, so the caller can switch to :func:`pinv`.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"a must be square, got {a.shape}")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"cannot solve {a.shape} against {b.shape}")
    if not _is_symmetric(a):
        raise ContractError("solve_spd requires a symmetric matrix")
    try:
        factor = cho_factor(a, lower=True, check_finite=False)
    except LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    diag = np.diag(factor[0]) ** 2
    if diag.min() <= DEFAULT_RTOL * max(np.trace(a), np.finfo(float).tiny):
        raise NotPositiveDefinite("Cholesky factor is numerically singular")
    return check_finite(cho_solve(factor, b, check_finite=False))


def _sym_pinv(a: np.ndarray, rtol: float) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    scale = float(np.sum(np.abs(w)))
    keep = np.abs(w) > rtol * scale
    inv_w = np.zeros_like(w)
    inv_w[keep] = 1.0 / w[keep]
    return (v * inv_w) @ v.T


def pinv(a, rtol: float = DEFAULT_RTOL) -> Matrix:
    """Moore-Penrose pseudoinverse from a symmetric eigendecomposition.

    Symmetric inputs are decomposed directly. Otherwise the smaller Gram
    matrix (``aᵀa`` or ``aaᵀ``) is decomposed and the pseudoinverse is
    assembled as ``(aᵀa)⁺aᵀ`` or ``aᵀ(aaᵀ)⁺``. Eigenvalues whose magnitude
    falls below ``rtol`` times the trace of the decomposed matrix are zeroed.
    """
    if rtol < 0:
        raise ContractError("rtol must be non-negative")
    a = as_matrix(a, "a")
    if a.size == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    if a.shape[0] == a.shape[1] and _is_symmetric(a, 1e-14):
        return check_finite(_sym_pinv(a, rtol))
    if a.shape[0] >= a.shape[1]:
        return check_finite(_sym_pinv(a.T @ a, rtol) @ a.T)
    return check_finite(a.T @ _sym_pinv(a @ a.T, rtol))


def inv_sqrt_psd(a, eig_floor: float = DEFAULT_EIG_FLOOR) -> Matrix:
    """Symmetric inverse square root of a PSD matrix.

    Eigenvalues below ``eig_floor * max(1, λ_max)`` (negative round-off
    included) get an inverse square root of zero, so ``r a r`` is the
    projector onto the row space of ``a``.
    """
    a = as_matrix(a, "a")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"a must be square, got {a.shape}")
    if not _is_symmetric(a):
        raise ContractError("inv_sqrt_psd requires a symmetric matrix")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    w = np.clip(w, 0.0, None)
    cut = eig_floor * max(1.0, float(w.max(initial=0.0)))
    keep = w > cut
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / np.sqrt(w[keep])
    return check_finite((v * inv) @ v.T)


@dataclass
class RngStream:
    """Seeded Philox stream; equal ``(seed, stream)`` pairs replay equal draws."""

    seed: int
    stream: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(entropy=int(self.seed) % 2**64, spawn_key=(int(self.stream) % 2**64,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, stream: int) -> "RngStream":
        """An independent stream derived from the same seed."""
        return RngStream(self.seed, (self.stream + 1) * 1_000_003 + stream)


def sample_normal(rng: RngStream, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> Matrix:
    if std < 0:
        raise ContractError("std must be non-negative")
    return mean + std * rng.generator.standard_normal((rows, cols))


def sample_uniform(rng: RngStream, rows: int, cols: int, lo: float = 0.0, hi: float = 1.0) -> Matrix:
    if lo > hi:
        raise ContractError("lo must not exceed hi")
    return rng.generator.uniform(lo, hi, size=(rows, cols))


# -- serialization ---------------------------------------------------------

def matrix_to_json(a) -> dict:
    a = as_matrix(a)
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": [float(x) for x in a.ravel()]}


def matrix_from_json(obj: dict) -> Matrix:
    rows, cols, data = obj["rows"], obj["cols"], obj["data"]
    if len(data) != rows * cols:
        raise DimensionError(f"expected {rows * cols} values, got {len(data)}")
    return as_matrix(np.asarray(data, dtype=np.float64).reshape(rows, cols))


def matrix_to_csv(a) -> str:
    a = as_matrix(a)
    buf = io.StringIO()
    for row in a:
        buf.write(",".join(repr(float(x)) for x in row))
        buf.write("\n")
    return buf.getvalue()


def matrix_from_csv(text: str) -> Matrix:
    rows = [line.split(",") for line in text.strip().splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 0))
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise DimensionError("ragged CSV rows")
    return as_matrix([[float(x) for x in r] for r in rows])


def dumps_matrix(a) -> str:
    return json.dumps(matrix_to_json(a))
