"""Stackable -former layers, the set-scoring model and optimizers.

A layer embeds its input once (shared across heads), runs one head kind per
head on the embedded rows, merges the heads and wraps everything in two
residual LayerNorm stages.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .kvq import mixing_node
from .linalg import ContractError, DimensionError, RngStream
from .nn import LayerNorm, Linear, MLP, Module

BLOCK_KINDS = ("informer", "sigma-informer", "transformer", "lin-transformer", "np-former")
HEAD_KINDS = ("informer", "sigma-informer", "attention", "linear")
_HEAD_FOR_BLOCK = {
    "informer": "informer",
    "sigma-informer": "sigma-informer",
    "transformer": "attention",
    "lin-transformer": "linear",
}


@dataclass
class BlockSpec:
    kind: str = "sigma-informer"
    layers: int = 1
    heads: int = 2
    model_width: int = 32
    hidden_width: int = 64
    input_dropout: float = 0.2

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ContractError(f"unknown block kind {self.kind!r}")
        if self.layers < 1:
            raise ContractError("layers must be >= 1")
        if self.heads < 1 or self.model_width % self.heads:
            raise ContractError(f"model_width {self.model_width} not divisible by heads {self.heads}")
        if not 0.0 <= self.input_dropout < 1.0:
            raise ContractError("input_dropout must be in [0, 1)")


@dataclass
class ScheduleSpec:
    kind: str = "constant"
    decay_rate: float = 0.8
    start_step: int = 0
    duration: int = 1000
    warmup_steps: int = 100

    def __post_init__(self):
        if self.kind not in ("constant", "exponential", "cosine-warmup"):
            raise ContractError(f"unknown schedule {self.kind!r}")
        if self.decay_rate <= 0 or self.duration <= 0 or self.warmup_steps <= 0:
            raise ContractError("schedule rates and lengths must be positive")


@dataclass
class OptimSpec:
    kind: str = "adam"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = ScheduleSpec(**self.schedule)
        if self.kind not in ("adam", "sgd-momentum"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0 or self.eps <= 0:
            raise ContractError("learning rate and eps must be positive")
        if self.weight_decay < 0:
            raise ContractError("weight decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# -- heads --------------------------------------------------------------------

def head_node(kind: str, EK: Node, EV: Node, EQ: Node, a: Optional[Node] = None,
              scale: float = 1.0) -> Node:
    """One head on embedded keys/values/queries.

    ``informer``: E_Q E_Kᵀ[(1−α)E_K E_Kᵀ + αI]⁻¹E_V, ``sigma-informer`` puts
    a row softmax around the mixing matrix, ``attention`` is σ(scale·E_Q E_Kᵀ)E_V
    and ``linear`` is E_Q E_Kᵀ E_V.
    """
    if EK.shape[-1] != EQ.shape[-1] or EK.shape[-2] != EV.shape[-2]:
        raise DimensionError(f"head shapes K{EK.shape} V{EV.shape} Q{EQ.shape}")
    if kind in ("informer", "sigma-informer"):
        if a is None:
            raise ContractError("informer heads need alpha")
        mix = mixing_node(EK, EQ, a, mode="sigmoid")
        if kind == "sigma-informer":
            mix = ad.op_softmax_rows(mix)
        return ad.op_matmul(mix, EV)
    logits = ad.op_matmul(EQ, ad.op_transpose(EK))
    if kind == "attention":
        if scale != 1.0:
            logits = ad.op_scale(logits, scale)
        return ad.op_matmul(ad.op_softmax_rows(logits), EV)
    if kind == "linear":
        return ad.op_matmul(logits, EV)
    raise ContractError(f"unknown head kind {kind!r}")


def head_forward(kind: str, E_K, E_V, E_Q, theta_sigma: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Closed-form evaluation of :func:`head_node` with α = sigmoid(θ_σ)."""
    a = ad.op_sigmoid(ad.constant(np.array([[theta_sigma]])))
    return head_node(kind, ad.constant(E_K), ad.constant(E_V), ad.constant(E_Q), a, scale).value


class NPBlock(Module):
    """Neural-process head: per-query [E_Q; e_C(mean_i [E_Kᵢ; E_Vᵢ])] then e_Z."""

    def __init__(self, d_in: int, width: int, hidden: int, rng: RngStream, d_v: Optional[int] = None):
        d_v = d_in if d_v is None else d_v
        self.e_K = Linear(d_in, width, rng.child(0))
        self.e_V = Linear(d_v, width, rng.child(1))
        self.e_Q = Linear(d_in, width, rng.child(2))
        self.e_C = MLP(2 * width, [hidden, width], rng.child(3))
        self.e_Z = MLP(2 * width, [hidden, width], rng.child(4))

    def __call__(self, K, V, Q) -> Node:
        EK, EV, EQ = self.e_K(K), self.e_V(V), self.e_Q(Q)
        pooled = ad.op_mean_rows(ad.op_concat_cols([EK, EV]))
        EC = self.e_C(pooled)
        ED = ad.op_concat_cols([EQ, EC])
        return self.e_Z(ED)


def np_block(K, V, Q, block: NPBlock) -> np.ndarray:
    return block(K, V, Q).value


# -- layers -------------------------------------------------------------------

class FormerLayer(Module):
    def __init__(self, spec: BlockSpec, rng: RngStream):
        D, H = spec.model_width, spec.heads
        dh = D // H
        self.kind = spec.kind
        self.heads = H
        self.scale = 1.0 / math.sqrt(dh)
        self.e_X = Linear(D, D, rng.child(0))
        if spec.kind == "np-former":
            self.np_heads = [NPBlock(D, dh, spec.hidden_width, rng.child(10 + h)) for h in range(H)]
        else:
            self.e_K = [Linear(D, dh, rng.child(100 + h)) for h in range(H)]
            self.e_V = [Linear(D, dh, rng.child(200 + h)) for h in range(H)]
            self.e_Q = [Linear(D, dh, rng.child(300 + h)) for h in range(H)]
            if spec.kind in ("informer", "sigma-informer"):
                self.theta = [_Scalar(0.0) for _ in range(H)]
        self.merge = Linear(D, D, rng.child(1))
        self.ln1 = LayerNorm(D)
        self.e_O = MLP(D, [spec.hidden_width, D], rng.child(2))
        self.ln2 = LayerNorm(D)

    def head_outputs(self, EX: Node) -> list[Node]:
        if self.kind == "np-former":
            return [blk(EX, EX, EX) for blk in self.np_heads]
        head_kind = _HEAD_FOR_BLOCK[self.kind]
        outs = []
        for h in range(self.heads):
            a = ad.op_sigmoid(self.theta[h].value) if head_kind.endswith("informer") else None
            outs.append(head_node(head_kind, self.e_K[h](EX), self.e_V[h](EX), self.e_Q[h](EX), a, self.scale))
        return outs

    def __call__(self, X) -> Node:
        X = ad.constant(X)
        EX = ad.op_relu(self.e_X(X))
        heads = self.head_outputs(EX)
        EZ = self.merge(heads[0] if len(heads) == 1 else ad.op_concat_cols(heads))
        O1 = self.ln1(ad.op_add(EZ, X))
        return self.ln2(ad.op_add(self.e_O(O1), O1))


class _Scalar(Module):
    def __init__(self, v: float):
        self.value = Parameter(np.array([[v]]))


def layer_forward(layer: FormerLayer, X) -> Node:
    return layer(X)


class SetScorer(Module):
    """Stacked layers over a set of rows, one logit per row."""

    def __init__(self, spec: BlockSpec, d_in: int, rng: RngStream):
        self.spec = spec
        self.d_in = d_in
        self.proj = Linear(d_in, spec.model_width, rng.child(0))
        self.layers = [FormerLayer(spec, rng.child(1 + i)) for i in range(spec.layers)]
        # no bias: a shared logit offset cancels in the softmax over rows
        self.readout = Linear(spec.model_width, 1, rng.child(99), bias=False)

    def __call__(self, X, dropout_rng: Optional[RngStream] = None) -> Node:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.d_in:
            raise DimensionError(f"input width {X.shape[-1]} != {self.d_in}")
        p = self.spec.input_dropout
        if dropout_rng is not None and p > 0:
            keep = dropout_rng.generator.random(X.shape) >= p
            X = X * keep / (1.0 - p)
        h = self.proj(X)
        for layer in self.layers:
            h = layer(h)
        logits = self.readout(h)  # (..., n, 1)
        return ad.op_transpose(logits)  # (..., 1, n)


# -- optimizers ---------------------------------------------------------------

def lr_at(spec: OptimSpec, step: int) -> float:
    s = spec.schedule
    if s.kind == "constant":
        return spec.lr
    if s.kind == "exponential":
        if step < s.start_step:
            return spec.lr
        return spec.lr * s.decay_rate ** ((step - s.start_step) / s.duration)
    if step >= s.warmup_steps:
        return spec.lr
    return spec.lr * 0.5 * (1.0 - math.cos(math.pi * step / s.warmup_steps))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
              spec: OptimSpec, lr: Optional[float] = None) -> tuple[dict, dict]:
    """One Adam update on plain arrays; returns new ``(params, state)``."""
    t = state.get("t", 0) + 1
    lr = spec.lr if lr is None else lr
    m_all, v_all = state.get("m", {}), state.get("v", {})
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        if spec.weight_decay:
            g = g + spec.weight_decay * p
        m = spec.beta1 * m_all.get(k, np.zeros_like(p)) + (1 - spec.beta1) * g
        v = spec.beta2 * v_all.get(k, np.zeros_like(p)) + (1 - spec.beta2) * g * g
        mhat = m / (1 - spec.beta1 ** t)
        vhat = v / (1 - spec.beta2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + spec.eps)
        new_m[k], new_v[k] = m, v
    return new_p, {"t": t, "m": new_m, "v": new_v}


def sgd_momentum_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict,
                      spec: OptimSpec, lr: Optional[float] = None) -> tuple[dict, dict]:
    """Heavy-ball SGD with additive weight decay."""
    lr = spec.lr if lr is None else lr
    vel = state.get("velocity", {})
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        g = g + spec.weight_decay * p
        v = spec.momentum * vel.get(k, np.zeros_like(p)) + g
        new_p[k] = p - lr * v
        new_v[k] = v
    return new_p, {"t": state.get("t", 0) + 1, "velocity": new_v}


class Optimizer:
    """Applies :func:`adam_step` / :func:`sgd_momentum_step` to Parameter nodes in place."""

    def __init__(self, params: dict[str, Node], spec: OptimSpec):
        self.params = params
        self.spec = spec
        self.state: dict = {}
        self.step_count = 0

    def step(self):
        values = {k: p.value for k, p in self.params.items()}
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.value) for k, p in self.params.items()}
        lr = lr_at(self.spec, self.step_count)
        fn = adam_step if self.spec.kind == "adam" else sgd_momentum_step
        new, self.state = fn(values, grads, self.state, self.spec, lr)
        for k, p in self.params.items():
            p.value = new[k]
        self.step_count += 1

    def zero_grad(self):
        ad.zero_grad(self.params.values())
