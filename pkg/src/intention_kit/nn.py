"""Small parameter containers on top of :mod:`intention_kit.autodiff`."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .linalg import ContractError, RngStream


class Module:
    """Named parameter tree. Children are registered by attribute assignment."""

    def __setattr__(self, name, value):
        if isinstance(value, (Module, Node)) or (
            isinstance(value, list) and value and all(isinstance(v, Module) for v in value)
        ):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Node]]:
        """Trainable leaves by dotted path; a shared leaf appears once, under its first path."""
        seen: set[int] = set()
        for key, node in self._walk(prefix):
            if node.id not in seen:
                seen.add(node.id)
                yield key, node

    def _walk(self, prefix: str) -> Iterator[tuple[str, Node]]:
        for name, child in self.__dict__.get("_children", {}).items():
            key = f"{prefix}{name}"
            if isinstance(child, Node):
                if child.requires_grad:
                    yield key, child
            elif isinstance(child, Module):
                yield from child._walk(key + ".")
            else:
                for i, m in enumerate(child):
                    yield from m._walk(f"{key}.{i}.")

    def parameters(self) -> dict[str, Node]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters().values())

    def zero_grad(self):
        ad.zero_grad(self.parameters().values())


def fan_in_uniform(rng: RngStream, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.generator.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: RngStream, bias: bool = True, init: str = "fan_in"):
        self.n_in, self.n_out = n_in, n_out
        if init == "identity":
            w = np.eye(n_in, n_out)
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            w = fan_in_uniform(rng, n_in, (n_in, n_out))
        self.weight = Parameter(w)
        if bias:
            b = np.zeros((1, n_out)) if init in ("identity", "zeros") else fan_in_uniform(rng, n_in, (1, n_out))
            self.bias = Parameter(b)
        else:
            self.bias = None

    def __call__(self, x) -> Node:
        out = ad.op_matmul(x, self.weight)
        if self.bias is not None:
            out = ad.op_add(out, self.bias)
        return out


ACTIVATIONS = {
    "relu": ad.op_relu,
    "leaky_relu": ad.op_leaky_relu,
    "sigmoid": ad.op_sigmoid,
    "softplus": ad.op_softplus,
    "none": lambda x: x,
}


class MLP(Module):
    """Row-wise MLP; ``sizes`` lists every layer width after the input."""

    def __init__(self, n_in: int, sizes: Sequence[int], rng: RngStream,
                 activation: str = "relu", final_activation: str = "none"):
        if not sizes:
            raise ContractError("an MLP needs at least one layer")
        widths = [n_in, *sizes]
        self.layers = [Linear(a, b, rng.child(i)) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        self.activation = ACTIVATIONS[activation]
        self.final_activation = ACTIVATIONS[final_activation]
        self.n_out = sizes[-1]

    def __call__(self, x) -> Node:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            x = self.activation(x) if i < len(self.layers) - 1 else self.final_activation(x)
        return x


class Identity(Module):
    def __init__(self, n: int):
        self.n_out = n

    def __call__(self, x) -> Node:
        return ad.constant(x)


class Embedding(Module):
    """Row embedding ``x -> [x, 1, mlp(x)]`` with each part optional.

    ``skip`` keeps the raw input so the embedding can represent the identity
    map exactly; ``bias_column`` appends a constant feature for affine fits.
    """

    def __init__(self, n_in: int, hidden: Sequence[int], rng: RngStream,
                 skip: bool = True, bias_column: bool = False, activation: str = "relu"):
        self.skip = skip
        self.bias_column = bias_column
        self.mlp = MLP(n_in, hidden, rng, activation=activation, final_activation=activation) if hidden else None
        self.n_out = (n_in if skip else 0) + (1 if bias_column else 0) + (hidden[-1] if hidden else 0)
        if self.n_out == 0:
            raise ContractError("embedding has no output features")

    def __call__(self, x) -> Node:
        x = ad.constant(x)
        parts = []
        if self.skip:
            parts.append(x)
        if self.bias_column:
            parts.append(ad.constant(np.ones(x.shape[:-1] + (1,))))
        if self.mlp is not None:
            parts.append(self.mlp(x))
        return parts[0] if len(parts) == 1 else ad.op_concat_cols(parts)


class FourierEmbedding(Module):
    """Random Fourier features √(2/D)·cos(xΩ + b), trainable Ω and b.

    With Ω ~ N(0, I/ℓ²) and b ~ U(0, 2π) the feature inner product
    approximates the Gaussian kernel exp(−‖x − y‖²/(2ℓ²)).
    """

    def __init__(self, n_in: int, width: int, rng: RngStream, lengthscale: float = 1.0):
        if lengthscale <= 0:
            raise ContractError("lengthscale must be positive")
        g = rng.generator
        self.omega = Parameter(g.standard_normal((n_in, width)) / lengthscale)
        self.phase = Parameter(g.uniform(0.0, 2.0 * np.pi, size=(1, width)))
        self.scale = float(np.sqrt(2.0 / width))
        self.n_out = width

    def __call__(self, x) -> Node:
        z = ad.op_add(ad.op_matmul(ad.constant(x), self.omega), self.phase)
        return ad.op_scale(ad.op_cos(z), self.scale)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = ad.LAYERNORM_EPS):
        self.gain = Parameter(np.ones((1, width)))
        self.bias = Parameter(np.zeros((1, width)))
        self.eps = eps

    def __call__(self, x) -> Node:
        return ad.op_add(ad.op_mul(ad.op_layernorm_rows(x, self.eps), self.gain), self.bias)
