"""Key-value-query computations: attention, intention and their relatives.

The closed-form functions here act on plain float64 matrices. The
differentiable counterparts used for training (:func:`intention_node` and
friends) build autodiff graphs and are checked against the closed forms.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .linalg import (
    DEFAULT_EIG_FLOOR,
    ContractError,
    DimensionError,
    Matrix,
    NotPositiveDefinite,
    as_matrix,
    check_finite,
    inv_sqrt_psd,
    pinv,
    solve_spd,
)
from .nn import Embedding, Identity, Linear, MLP, Module


@dataclass(frozen=True)
class KvqBatch:
    K: Matrix
    V: Matrix
    Q: Matrix
    targets: Optional[Matrix] = None

    def __post_init__(self):
        K, V, Q = (as_matrix(m, n) for m, n in ((self.K, "K"), (self.V, "V"), (self.Q, "Q")))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "Q", Q)
        if K.shape[0] != V.shape[0]:
            raise DimensionError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
        if K.shape[1] != Q.shape[1]:
            raise DimensionError(f"K width {K.shape[1]} != Q width {Q.shape[1]}")
        if K.shape[0] < 1 or Q.shape[0] < 1:
            raise DimensionError("need at least one context and one query row")
        if self.targets is not None:
            t = as_matrix(self.targets, "targets")
            if t.shape != (Q.shape[0], V.shape[1]):
                raise DimensionError(f"targets shape {t.shape} != {(Q.shape[0], V.shape[1])}")
            object.__setattr__(self, "targets", t)

    @property
    def N(self) -> int:
        return self.K.shape[0]

    @property
    def M(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.K.shape[1]

    @property
    def k(self) -> int:
        return self.V.shape[1]


ALPHA_MODES = ("fixed", "sigmoid", "softplus")


@dataclass(frozen=True)
class AlphaSpec:
    """Covariance smoothing. ``value`` is α itself for ``fixed`` and the raw
    parameter θ for the learnable modes (α = sigmoid(θ) or softplus(θ))."""

    mode: str = "fixed"
    value: float = 0.0

    def __post_init__(self):
        if self.mode not in ALPHA_MODES:
            raise ContractError(f"unknown alpha mode {self.mode!r}")
        if self.mode == "fixed" and self.value < 0:
            raise ContractError("fixed alpha must be non-negative")

    @property
    def alpha(self) -> float:
        if self.mode == "fixed":
            return float(self.value)
        if self.mode == "sigmoid":
            return float(1.0 / (1.0 + math.exp(-self.value)))
        return float(np.logaddexp(0.0, self.value))


def _as_alpha(alpha) -> AlphaSpec:
    if isinstance(alpha, AlphaSpec):
        return alpha
    return AlphaSpec("fixed", float(alpha))


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "linear"
    gamma: float = -1.0

    def __post_init__(self):
        if self.kind not in ("linear", "gaussian"):
            raise ContractError(f"unknown kernel {self.kind!r}")
        if self.kind == "gaussian" and not self.gamma < 0:
            raise ContractError("gaussian kernel needs gamma < 0")


@dataclass
class ModuleSpec:
    kind: str = "intention"
    alpha: AlphaSpec = field(default_factory=AlphaSpec)
    kernel: KernelSpec = field(default_factory=KernelSpec)
    heads: int = 1
    widths: list = field(default_factory=list)

    KINDS = ("intention", "sigma_intention", "attention", "linear_attention", "np", "mlp")

    def __post_init__(self):
        if isinstance(self.alpha, dict):
            self.alpha = AlphaSpec(**self.alpha)
        if isinstance(self.kernel, dict):
            self.kernel = KernelSpec(**self.kernel)
        if self.kind not in self.KINDS:
            raise ContractError(f"unknown module kind {self.kind!r}")
        if self.heads < 1:
            raise ContractError("heads must be >= 1")
        self.widths = [int(w) for w in self.widths]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModuleSpec":
        obj = json.loads(text)
        unknown = set(obj) - {"kind", "alpha", "kernel", "heads", "widths"}
        if unknown:
            raise ContractError(f"unknown ModuleSpec keys: {sorted(unknown)}")
        return cls(**obj)


# -- closed-form KVQ operations ------------------------------------------------

def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _regularized(gram: Matrix, alpha: AlphaSpec) -> Matrix:
    a = alpha.alpha
    eye = np.eye(gram.shape[0])
    if alpha.mode == "sigmoid":
        return (1.0 - a) * gram + a * eye
    return gram + a * eye


def _solve_sym(a: Matrix, b: Matrix) -> Matrix:
    """Cholesky solve, or the pseudoinverse when ``a`` is (near) singular."""
    try:
        return solve_spd(a, b)
    except NotPositiveDefinite:
        return check_finite(pinv(a) @ b)


def linear_attention(b: KvqBatch) -> Matrix:
    return check_finite((b.Q @ b.K.T) @ b.V)


def attention(b: KvqBatch, scale: float = 1.0) -> Matrix:
    """Row-softmax attention σ(QKᵀ·scale)V; pass ``1/sqrt(d)`` for the Transformer form."""
    return check_finite(_softmax_rows(scale * (b.Q @ b.K.T)) @ b.V)


def intention_weights(K: Matrix, V: Matrix, alpha=0.0) -> Matrix:
    """The fitted map w = [KᵀK + αI]⁻¹KᵀV (pseudoinverse when singular)."""
    alpha = _as_alpha(alpha)
    return _solve_sym(_regularized(K.T @ K, alpha), K.T @ V)


def intention(b: KvqBatch, alpha=0.0) -> Matrix:
    """Q[KᵀK + αI]⁻¹KᵀV, inverting the d×d covariance."""
    return check_finite(b.Q @ intention_weights(b.K, b.V, alpha))


def intention_mixing(b: KvqBatch, alpha=0.0) -> Matrix:
    """The M×N mixing matrix Q[KᵀK + αI]⁻¹Kᵀ."""
    alpha = _as_alpha(alpha)
    return check_finite(b.Q @ _solve_sym(_regularized(b.K.T @ b.K, alpha), b.K.T))


def sigma_intention(b: KvqBatch, alpha=0.0) -> Matrix:
    return check_finite(_softmax_rows(intention_mixing(b, alpha)) @ b.V)


def intention_dual(b: KvqBatch, alpha=0.0) -> Matrix:
    """[QKᵀ](KKᵀ + αI)⁻¹V, inverting the N×N Gram matrix."""
    alpha = _as_alpha(alpha)
    return check_finite((b.Q @ b.K.T) @ _solve_sym(_regularized(b.K @ b.K.T, alpha), b.V))


def choose_branch(N: int, d: int) -> str:
    """Invert whichever covariance is smaller: d×d when d < N, else N×N."""
    return "primal" if d < N else "dual"


def intention_auto(b: KvqBatch, alpha=0.0) -> tuple[Matrix, str]:
    branch = choose_branch(b.N, b.d)
    out = intention(b, alpha) if branch == "primal" else intention_dual(b, alpha)
    return out, branch


def gaussian_kernel(x, y, gamma: float) -> float:
    """exp(γ‖x−y‖²) for γ < 0."""
    if not gamma < 0:
        raise ContractError("gaussian kernel needs gamma < 0")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    return float(np.exp(gamma * np.sum((x - y) ** 2)))


def kernel_gram(X: Matrix, Y: Matrix, spec: KernelSpec) -> Matrix:
    X, Y = as_matrix(X, "X"), as_matrix(Y, "Y")
    if X.shape[1] != Y.shape[1]:
        raise DimensionError(f"column mismatch {X.shape} vs {Y.shape}")
    if spec.kind == "linear":
        return X @ Y.T
    sq = (X ** 2).sum(1)[:, None] + (Y ** 2).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.exp(spec.gamma * np.clip(sq, 0.0, None))


def kernel_map(X: Matrix, K: Matrix, spec: KernelSpec = KernelSpec(),
               eig_floor: float = DEFAULT_EIG_FLOOR) -> Matrix:
    """φ(X) = 𝒦(X, K)·𝒦(K, K)^{-1/2}; one output column per context row."""
    gram = kernel_gram(K, K, spec)
    w = np.linalg.eigvalsh(0.5 * (gram + gram.T))
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise ContractError("kernel Gram matrix is not positive semi-definite")
    return check_finite(kernel_gram(X, K, spec) @ inv_sqrt_psd(gram, eig_floor))


SCALING_VARIANTS = ("unscaled", "scaled", "scaled-regularized")


def scaled_intention(b: KvqBatch, variant: str = "scaled", alpha_param: float = 0.0) -> Matrix:
    """The value-free intention map Z (M×N) with optional √d normalisation.

    ``scaled-regularized`` mixes the Gram with the identity through
    sigmoid(``alpha_param``) and halves the √d prefactor.
    """
    if variant not in SCALING_VARIANTS:
        raise ContractError(f"unknown variant {variant!r}")
    gram = b.K @ b.K.T
    qk = b.Q @ b.K.T
    if variant == "unscaled":
        return check_finite(qk @ _solve_sym(gram, np.eye(b.N)))
    root_d = math.sqrt(b.d)
    if variant == "scaled":
        return check_finite(root_d * qk @ _solve_sym(gram, np.eye(b.N)))
    s = 1.0 / (1.0 + math.exp(-alpha_param))
    return check_finite(0.5 * root_d * qk @ _solve_sym(s * gram + (1.0 - s) * np.eye(b.N), np.eye(b.N)))


def multi_head(apply: Callable[[KvqBatch], Matrix], heads: int, b: KvqBatch,
               merge: Optional[Matrix] = None) -> Matrix:
    """Split K, Q and V columns into ``heads`` groups, apply, concatenate, merge."""
    if heads < 1 or b.d % heads or b.k % heads:
        raise ContractError(f"widths d={b.d}, k={b.k} not divisible by heads={heads}")
    dh, kh = b.d // heads, b.k // heads
    outs = []
    for h in range(heads):
        sub = KvqBatch(b.K[:, h * dh:(h + 1) * dh], b.V[:, h * kh:(h + 1) * kh], b.Q[:, h * dh:(h + 1) * dh])
        outs.append(apply(sub))
    out = np.concatenate(outs, axis=1)
    if merge is not None:
        out = out @ as_matrix(merge, "merge")
    return check_finite(out)


# -- differentiable forms ------------------------------------------------------

def alpha_node(alpha: AlphaSpec, theta: Optional[Node] = None) -> Node:
    """α as a 1x1 node; learnable modes read θ from ``theta``."""
    if alpha.mode == "fixed":
        return ad.constant(np.array([[alpha.alpha]]))
    if theta is None:
        theta = ad.constant(np.array([[alpha.value]]))
    return ad.op_sigmoid(theta) if alpha.mode == "sigmoid" else ad.op_softplus(theta)


def _regularized_node(gram: Node, a: Node, mode: str) -> Node:
    eye = ad.constant(np.eye(gram.shape[-1]))
    if mode == "sigmoid":
        one_minus = ad.op_sub(ad.constant(np.ones((1, 1))), a)
        return ad.op_add(ad.op_mul(gram, one_minus), ad.op_mul(eye, a))
    return ad.op_add(gram, ad.op_mul(eye, a))


def intention_weights_node(EK: Node, EV: Node, a: Node, mode: str = "fixed",
                           branch: str = "auto") -> tuple[Node, str]:
    """w = [EKᵀEK + αI]⁻¹EKᵀEV, or its push-through twin EKᵀ[EKEKᵀ + αI]⁻¹EV."""
    n, d = EK.shape[-2], EK.shape[-1]
    if branch == "auto":
        branch = choose_branch(n, d)
    EKt = ad.op_transpose(EK)
    if branch == "primal":
        w = ad.op_solve(_regularized_node(EKt @ EK, a, mode), EKt @ EV)
    else:
        w = EKt @ ad.op_solve(_regularized_node(EK @ EKt, a, mode), EV)
    return w, branch


def intention_node(EK, EV, EQ, a: Node, mode: str = "fixed", branch: str = "auto") -> Node:
    w, _ = intention_weights_node(ad.constant(EK), ad.constant(EV), a, mode, branch)
    return ad.op_matmul(EQ, w)


def mixing_node(EK, EQ, a: Node, mode: str = "fixed") -> Node:
    """EQ EKᵀ[EK EKᵀ + αI]⁻¹, the N×N-inverse form used inside blocks."""
    EK, EQ = ad.constant(EK), ad.constant(EQ)
    EKt = ad.op_transpose(EK)
    reg = _regularized_node(EK @ EKt, a, mode)
    # (EQ EKᵀ) R⁻¹ = (R⁻ᵀ (EQ EKᵀ)ᵀ)ᵀ and R is symmetric
    return ad.op_transpose(ad.op_solve(reg, ad.op_transpose(EQ @ EKt)))


def sq_dist_node(X, Y) -> Node:
    """Pairwise squared distances ‖xᵢ − yⱼ‖² over the last two axes."""
    X, Y = ad.constant(X), ad.constant(Y)
    ones = ad.constant(np.ones((X.shape[-1], 1)))
    xx = ad.op_matmul(ad.op_mul(X, X), ones)
    yy = ad.op_transpose(ad.op_matmul(ad.op_mul(Y, Y), ones))
    cross = ad.op_scale(ad.op_matmul(X, ad.op_transpose(Y)), -2.0)
    return ad.op_add(ad.op_add(xx, yy), cross)


def gaussian_gram_node(X, Y, gamma: Node) -> Node:
    """exp(γ‖xᵢ − yⱼ‖²) with γ a 1x1 node (γ < 0)."""
    return ad.op_exp(ad.op_mul(sq_dist_node(X, Y), gamma))


def kernel_intention_node(EK, EV, EQ, a: Node, gamma: Node) -> Node:
    """Intention in the Gaussian kernel-map feature space.

    With φ(X) = 𝒦(X, K)𝒦(K, K)^{-1/2} the Intention output collapses to
    𝒦(Q, K)[𝒦(K, K) + αI]⁻¹E_V, so no matrix square root is needed.
    """
    gram = gaussian_gram_node(EK, EK, gamma)
    cross = gaussian_gram_node(EQ, EK, gamma)
    return ad.op_matmul(cross, ad.op_solve(_regularized_node(gram, a, "fixed"), EV))


# -- the Intention module ------------------------------------------------------

class IntentionModule(Module):
    """Predictions E_Q·w(K, V) with w = e_w[Σ(E_K)⁻¹E_KᵀE_V].

    Each embedding is an :class:`Embedding`, an :class:`MLP` or the identity.
    ``e_w`` acts on the fitted map column-wise (it maps the value width).
    """

    def __init__(self, e_K: Module, e_V: Module, e_Q: Module, e_w: Module,
                 alpha: AlphaSpec = AlphaSpec(), branch: str = "auto"):
        self.e_K, self.e_V, self.e_Q, self.e_w = e_K, e_V, e_Q, e_w
        self.alpha_spec = alpha
        self.branch = branch
        if alpha.mode != "fixed":
            self.theta = ad.Parameter(np.array([[alpha.value]]))
        else:
            self.theta = None

    @classmethod
    def identity(cls, d: int, k: int, alpha=0.0) -> "IntentionModule":
        return cls(Identity(d), Identity(k), Identity(d), Identity(k), _as_alpha(alpha))

    def alpha(self) -> Node:
        return alpha_node(self.alpha_spec, self.theta)

    def weights(self, K, V) -> Node:
        EK = self.e_K(K)
        EV = self.e_V(V)
        w, _ = intention_weights_node(EK, EV, self.alpha(), self.alpha_spec.mode, self.branch)
        return self.e_w(w)

    def __call__(self, K, V, Q) -> tuple[Node, Node]:
        w = self.weights(K, V)
        return ad.op_matmul(self.e_Q(Q), w), w


def intention_module(b: KvqBatch, params: IntentionModule) -> tuple[Matrix, Matrix]:
    pred, w = params(b.K, b.V, b.Q)
    return pred.value, w.value


__all__ = [
    "AlphaSpec", "Embedding", "IntentionModule", "KernelSpec", "KvqBatch", "Linear", "MLP", "ModuleSpec",
    "attention", "choose_branch", "gaussian_kernel", "intention", "intention_auto", "intention_dual",
    "intention_mixing", "intention_module", "intention_node", "kernel_intention_node", "intention_weights", "kernel_gram", "kernel_map",
    "linear_attention", "mixing_node", "multi_head", "scaled_intention", "sigma_intention",
]
