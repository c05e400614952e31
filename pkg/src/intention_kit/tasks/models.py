"""Trainable KVQ regressors used by the experiments.

Every model maps batched ``(K, V, Q)`` arrays with shapes ``(B, N, d)``,
``(B, N, k)`` and ``(B, M, d)`` to predictions. In ``query`` mode the output
is one row per query, ``(B, M, out)``; in ``set`` mode the whole context is
summarised into a single row, ``(B, 1, out)``.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .. import autodiff as ad
from ..autodiff import Node
from ..blocks import head_node
from ..kvq import AlphaSpec, alpha_node, intention_weights_node
from ..linalg import ContractError, DimensionError, RngStream
from ..nn import MLP, Embedding, FourierEmbedding, Identity, Linear, Module

OUTPUT_MODES = ("query", "set")


def _flatten_rows(x: Node) -> Node:
    """(B, n, c) -> (B, 1, n·c)."""
    b = x.shape[:-2]
    return ad.op_reshape(x, b + (1, x.shape[-2] * x.shape[-1]))


def _check_mode(mode: str):
    if mode not in OUTPUT_MODES:
        raise ContractError(f"unknown output mode {mode!r}")


class KvqModel(Module):
    kind = "base"
    mode = "query"

    def __call__(self, K, V, Q) -> Node:
        raise NotImplementedError

    def predict(self, K, V, Q) -> np.ndarray:
        return self(K, V, Q).value


class IntentionRegressor(KvqModel):
    """Least-squares fit in embedded space.

    query mode: E_Q·w with w = [E_KᵀE_K + αI]⁻¹E_KᵀE_V, optionally decoded by e_P.
    set mode: the flattened w itself is decoded by e_P, queries are ignored.
    """

    kind = "intention"

    def __init__(self, e_K: Module, e_V: Module, e_Q: Optional[Module], e_P: Optional[Module],
                 alpha: AlphaSpec, mode: str = "query", branch: str = "auto"):
        _check_mode(mode)
        if mode == "set" and e_P is None:
            raise ContractError("set mode needs a decoder for w")
        self.mode = mode
        self.e_K, self.e_V = e_K, e_V
        self.e_Q = e_Q if e_Q is not None else e_K
        self.e_P = e_P
        self.alpha_spec = alpha
        self.branch = branch
        self.theta = ad.Parameter(np.array([[alpha.value]])) if alpha.mode != "fixed" else None

    def alpha(self) -> Node:
        return alpha_node(self.alpha_spec, self.theta)

    def weights(self, K, V) -> Node:
        w, _ = intention_weights_node(self.e_K(K), self.e_V(V), self.alpha(), self.alpha_spec.mode, self.branch)
        return w

    def __call__(self, K, V, Q) -> Node:
        w = self.weights(K, V)
        if self.mode == "set":
            return self.e_P(_flatten_rows(w))
        out = ad.op_matmul(self.e_Q(Q), w)
        return self.e_P(out) if self.e_P is not None else out


class AttentionRegressor(KvqModel):
    """Multi-head softmax attention on embedded rows, decoded by e_P."""

    kind = "attention"

    def __init__(self, e_K: Module, e_V: Module, e_Q: Module, e_P: Module, heads: int, mode: str = "query"):
        _check_mode(mode)
        width = e_K.n_out
        if width % heads or e_Q.n_out != width or e_V.n_out % heads:
            raise DimensionError(f"embedding widths {e_K.n_out}/{e_Q.n_out}/{e_V.n_out} vs {heads} heads")
        self.mode = mode
        self.heads = heads
        self.e_K, self.e_V, self.e_Q, self.e_P = e_K, e_V, e_Q, e_P
        self.scale = 1.0 / math.sqrt(width // heads)

    def __call__(self, K, V, Q) -> Node:
        EK, EV, EQ = self.e_K(K), self.e_V(V), self.e_Q(Q)
        dk, dv = EK.shape[-1] // self.heads, EV.shape[-1] // self.heads
        outs = []
        for h in range(self.heads):
            outs.append(head_node(
                "attention",
                ad.op_slice_cols(EK, h * dk, (h + 1) * dk),
                ad.op_slice_cols(EV, h * dv, (h + 1) * dv),
                ad.op_slice_cols(EQ, h * dk, (h + 1) * dk),
                scale=self.scale,
            ))
        H = outs[0] if len(outs) == 1 else ad.op_concat_cols(outs)
        H = ad.op_leaky_relu(H)
        if self.mode == "set":
            H = ad.op_mean_rows(H)
        return self.e_P(H)


class NPRegressor(KvqModel):
    """Mean of e_H([k, v]) over the context, decoded with (query mode) or without the query."""

    kind = "np"

    def __init__(self, e_H: Module, e_P: Module, mode: str = "query"):
        _check_mode(mode)
        self.mode = mode
        self.e_H, self.e_P = e_H, e_P

    def __call__(self, K, V, Q) -> Node:
        pooled = ad.op_mean_rows(self.e_H(ad.op_concat_cols([K, V])))
        if self.mode == "set":
            return self.e_P(pooled)
        return self.e_P(ad.op_concat_cols([pooled, ad.constant(Q)]))


class MLPRegressor(KvqModel):
    """Plain MLP on the flattened context (plus the query row in query mode)."""

    kind = "mlp"

    def __init__(self, e_P: Module, mode: str = "query"):
        _check_mode(mode)
        self.mode = mode
        self.e_P = e_P

    def __call__(self, K, V, Q) -> Node:
        ctx = _flatten_rows(ad.op_concat_cols([K, V]))
        if self.mode == "set":
            return self.e_P(ctx)
        return self.e_P(ad.op_concat_cols([ctx, ad.constant(Q)]))


# -- per-task architectures ---------------------------------------------------

def _shrink_last(mlp: MLP, factor: float) -> MLP:
    last = mlp.layers[-1]
    last.weight.value[...] *= factor
    if last.bias is not None:
        last.bias.value[...] *= factor
    return mlp


def _shape_of(task_kind: str, d: int) -> dict:
    """Input/output widths and output mode per task."""
    if task_kind == "sine":
        return dict(d=1, k=1, out=1, N=10, mode="query")
    if task_kind == "kabsch":
        return dict(d=2, k=2, out=2, N=5, mode="query")
    if task_kind == "policy":
        return dict(d=3, k=3, out=2, N=5, mode="set")
    if task_kind == "scaling":
        return dict(d=d, k=1, out=d, N=10, mode="set")
    raise ContractError(f"no trainable regressor for task {task_kind!r}")


def build_regressor(task_kind: str, model_kind: str, rng: RngStream, widths: Sequence[int] = (),
                    heads: int = 4, alpha: Optional[AlphaSpec] = None, d: int = 2, N: Optional[int] = None) -> KvqModel:
    """Desk-scale architecture for ``model_kind`` on ``task_kind``.

    ``widths`` overrides the hidden sizes; the scaling experiment passes its
    searched width here.
    """
    s = _shape_of(task_kind, d)
    N = s["N"] if N is None else N
    mode = s["mode"]
    dd, k, out = s["d"], s["k"], s["out"]
    widths = list(widths)

    if model_kind == "intention":
        if task_kind == "sine":
            # random Fourier features: untrained this is approximately Gaussian
            # kernel regression; training moves the frequencies
            emb = FourierEmbedding(dd, (widths or [64])[-1], rng.child(0), lengthscale=2.0)
            return IntentionRegressor(emb, Identity(k), None, None, alpha or AlphaSpec("softplus", -5.0))
        if task_kind == "kabsch":
            # starts as the exact affine least-squares fit; training adds features
            h = widths or [64, 64]
            emb = Embedding(dd, h, rng.child(0), skip=True, bias_column=True)
            emb.mlp.final_activation = lambda x: x
            _shrink_last(emb.mlp, 0.01)
            return IntentionRegressor(emb, Identity(k), None, None, alpha or AlphaSpec("softplus", -5.0))
        if task_kind == "policy":
            h = widths or [128, 64]
            e_K = Embedding(dd, [], rng.child(0), skip=True, bias_column=True)
            e_V = MLP(dd, h, rng.child(1))
            e_P = MLP(e_K.n_out * h[-1], [128, out], rng.child(2))
            return IntentionRegressor(e_K, e_V, None, e_P, alpha or AlphaSpec("softplus", -5.0), mode="set")
        if task_kind == "scaling":
            h = widths or [2]
            e_K = Embedding(dd, [h[0], h[0]], rng.child(0), skip=True)
            e_P = Linear(e_K.n_out, out, rng.child(1))
            return IntentionRegressor(e_K, Identity(k), None, e_P, alpha or AlphaSpec("fixed", 1e-8), mode="set")

    if model_kind == "attention":
        h = widths or [64, 64]
        width = h[-1] - h[-1] % heads or heads
        e_K = MLP(dd, [*h[:-1], width], rng.child(0))
        e_V = MLP(k, [*h[:-1], width], rng.child(1))
        e_Q = e_K if mode == "query" else MLP(dd, [*h[:-1], width], rng.child(2))
        e_P = MLP(width, [h[0], out], rng.child(3))
        return AttentionRegressor(e_K, e_V, e_Q, e_P, heads, mode)

    if model_kind == "np":
        h = widths or [64, 64]
        e_H = MLP(dd + k, h, rng.child(0))
        n_in = h[-1] + (dd if mode == "query" else 0)
        e_P = MLP(n_in, [*h, out], rng.child(1))
        return NPRegressor(e_H, e_P, mode)

    if model_kind == "mlp":
        h = widths or [64, 64, 64]
        n_in = N * (dd + k) + (dd if mode == "query" else 0)
        return MLPRegressor(MLP(n_in, [*h, out], rng.child(0)), mode)

    raise ContractError(f"unknown model kind {model_kind!r}")


__all__ = [
    "AttentionRegressor", "IntentionRegressor", "KvqModel", "MLPRegressor", "NPRegressor", "build_regressor",
]
