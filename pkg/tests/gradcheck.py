"""Finite-difference gradient checks shared by the unit and acceptance suites."""

import numpy as np

from intention_kit import autodiff as ad
from intention_kit.kvq import AlphaSpec, IntentionModule
from intention_kit.linalg import RngStream
from intention_kit.nn import MLP, Embedding


def rel_grad_err(analytic, numeric) -> float:
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_op(build, inputs, g) -> float:
    """Worst relative error over ``inputs`` of d sum(R * build(*params)) / d input."""
    params = [ad.Parameter(x) for x in inputs]
    R = g.standard_normal(build(*params).shape)

    def f():
        return float(np.sum(R * build(*params).value))

    ad.zero_grad(params)
    ad.backward(ad.op_sum(ad.op_mul(build(*params), ad.constant(R))))
    return max(rel_grad_err(p.grad, ad.numerical_grad(f, p.value)) for p in params)


def _spd(g, n):
    A = g.standard_normal((n + 3, n))
    return A.T @ A + np.eye(n)


def _away_from_zero(g, shape):
    x = g.standard_normal(shape)
    return np.where(np.abs(x) < 0.1, np.sign(x) * 0.1 + x, x)


# op name -> (builder, input sampler)
OPS = {
    "matmul": (lambda a, b: ad.op_matmul(a, b), lambda g: [g.standard_normal((3, 4)), g.standard_normal((4, 2))]),
    "matmul_batched": (lambda a, b: ad.op_matmul(a, b),
                       lambda g: [g.standard_normal((2, 3, 4)), g.standard_normal((4, 2))]),
    "matmul_batched_both": (lambda a, b: ad.op_matmul(a, b),
                            lambda g: [g.standard_normal((2, 3, 4)), g.standard_normal((2, 4, 2))]),
    "add_broadcast": (lambda a, b: ad.op_add(a, b), lambda g: [g.standard_normal((3, 4)), g.standard_normal((1, 4))]),
    "sub": (lambda a, b: ad.op_sub(a, b), lambda g: [g.standard_normal((3, 4)), g.standard_normal((3, 4))]),
    "mul": (lambda a, b: ad.op_mul(a, b), lambda g: [g.standard_normal((3, 4)), g.standard_normal((3, 1))]),
    "scale": (lambda a: ad.op_scale(a, -1.7), lambda g: [g.standard_normal((3, 4))]),
    "transpose": (lambda a: ad.op_transpose(a), lambda g: [g.standard_normal((3, 4))]),
    "reshape": (lambda a: ad.op_reshape(a, (4, 3)), lambda g: [g.standard_normal((3, 4))]),
    "relu": (lambda a: ad.op_relu(a), lambda g: [_away_from_zero(g, (3, 4))]),
    "leaky_relu": (lambda a: ad.op_leaky_relu(a), lambda g: [_away_from_zero(g, (3, 4))]),
    "sigmoid": (lambda a: ad.op_sigmoid(a), lambda g: [g.standard_normal((3, 4))]),
    "softplus": (lambda a: ad.op_softplus(a), lambda g: [g.standard_normal((3, 4))]),
    "exp": (lambda a: ad.op_exp(a), lambda g: [g.standard_normal((3, 4))]),
    "cos": (lambda a: ad.op_cos(a), lambda g: [g.standard_normal((3, 4))]),
    "softmax_rows": (lambda a: ad.op_softmax_rows(a), lambda g: [g.standard_normal((3, 4))]),
    "log_softmax_rows": (lambda a: ad.op_log_softmax_rows(a), lambda g: [g.standard_normal((3, 4))]),
    "layernorm_rows": (lambda a: ad.op_layernorm_rows(a), lambda g: [g.standard_normal((3, 4))]),
    "mean_rows": (lambda a: ad.op_mean_rows(a), lambda g: [g.standard_normal((3, 4))]),
    "sum": (lambda a: ad.op_sum(a), lambda g: [g.standard_normal((3, 4))]),
    "concat_cols": (lambda a, b: ad.op_concat_cols([a, b]),
                    lambda g: [g.standard_normal((3, 2)), g.standard_normal((3, 4))]),
    "slice_cols": (lambda a: ad.op_slice_cols(a, 1, 3), lambda g: [g.standard_normal((3, 4))]),
    "inverse": (lambda a: ad.op_inverse(a), lambda g: [_spd(g, 4)]),
    "solve": (lambda a, b: ad.op_solve(a, b), lambda g: [_spd(g, 4), g.standard_normal((4, 2))]),
    "loss_mse": (lambda a: ad.loss_mse(a, np.linspace(-1, 1, 12).reshape(3, 4)), lambda g: [g.standard_normal((3, 4))]),
    "loss_softmax_xent": (lambda a: ad.loss_softmax_xent(a, [0, 3, 1]), lambda g: [g.standard_normal((3, 4))]),
}


def op_grad_errors(seed: int, instances: int = 20) -> dict[str, float]:
    g = RngStream(seed).generator
    out = {}
    for name, (build, sample) in OPS.items():
        out[name] = max(check_op(build, sample(g), g) for _ in range(instances))
    return out


def intention_module_grad_error(seed: int) -> float:
    """Worst relative error over every parameter of a small intention module under MSE."""
    rng = RngStream(seed)
    g = rng.generator
    d, k, N, M = 2, 2, 6, 4
    e_K = Embedding(d, [5], rng.child(1), skip=True, bias_column=True, activation="sigmoid")
    e_Q = e_K
    e_V = MLP(k, [4, 3], rng.child(2), activation="sigmoid")
    e_w = MLP(3, [3], rng.child(3), activation="sigmoid")
    module = IntentionModule(e_K, e_V, e_Q, e_w, AlphaSpec("softplus", -1.0))
    K, V, Q = g.standard_normal((N, d)), g.standard_normal((N, k)), g.standard_normal((M, d))
    target = g.standard_normal((M, 3))
    params = module.parameters()

    def loss():
        return ad.loss_mse(module(K, V, Q)[0], target)

    ad.zero_grad(params.values())
    ad.backward(loss())
    worst = 0.0
    for p in params.values():
        num = ad.numerical_grad(lambda: float(loss().value[0, 0]), p.value)
        worst = max(worst, rel_grad_err(p.grad, num))
    return worst
