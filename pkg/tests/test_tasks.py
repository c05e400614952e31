import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gen, seeds
from intention_kit.autodiff import Node
from intention_kit.blocks import BlockSpec, OptimSpec
from intention_kit.kvq import AlphaSpec, ModuleSpec
from intention_kit.linalg import ContractError, RngStream
from intention_kit.nn import FourierEmbedding, Identity
from intention_kit.tasks import experiments as ex
from intention_kit.tasks import generators as g
from intention_kit.tasks import metrics, oracles
from intention_kit.tasks.models import IntentionRegressor, build_regressor
from intention_kit.tasks.train import (
    STREAM_EVAL, STREAM_INIT, RunRecord, TaskSpec, build_model, load_run, records_from_csv, records_to_csv,
    sample_batch, train,
)


# -- generators ---------------------------------------------------------------

@given(seeds)
def test_linreg2d_is_noiseless_and_deterministic(seed):
    a_in, a_ex = g.gen_linreg2d(RngStream(seed), 7, 11, 13)
    b_in, _ = g.gen_linreg2d(RngStream(seed), 7, 11, 13)
    assert np.array_equal(a_in.K, b_in.K) and np.array_equal(a_in.targets, b_in.targets)
    assert a_in.K.shape == (7, 2) and a_in.Q.shape == (11, 2) and a_ex.Q.shape == (13, 2)
    assert np.all(np.abs(a_in.Q) <= 1.0) and np.all(np.abs(a_ex.Q) <= 25.0)
    w, *_ = np.linalg.lstsq(a_in.K, a_in.V, rcond=None)
    assert np.allclose(a_in.Q @ w, a_in.targets, atol=1e-8)
    assert np.allclose(a_ex.Q @ w, a_ex.targets, atol=1e-6)


def test_linreg2d_rejects_empty():
    with pytest.raises(ContractError):
        g.gen_linreg2d(RngStream(0), 0)


@given(seeds, st.integers(1, 8))
def test_scaling_targets_are_linear(seed, d):
    x, y, W = g.gen_scaling(RngStream(seed), d)
    assert x.shape == (10, d) and y.shape == (10, 1) and W.shape == (d, 1)
    assert np.allclose(x @ W, y)


@given(seeds)
def test_sine_amplitude_and_subset(seed):
    b = g.gen_sine(RngStream(seed), 10, 50)
    assert np.all(np.abs(b.targets) <= 5.0)
    assert np.all(np.abs(b.Q) <= 6.0)
    pairs = {(float(x), float(y)) for x, y in zip(b.Q[:, 0], b.targets[:, 0])}
    assert all((float(x), float(y)) in pairs for x, y in zip(b.K[:, 0], b.V[:, 0]))
    assert len({float(x) for x in b.K[:, 0]}) == 10


def test_sine_context_larger_than_queries():
    with pytest.raises(ContractError):
        g.gen_sine(RngStream(0), 20, 10)


@given(seeds)
def test_policy_distances_and_trilateration(seed):
    obs, t = g.gen_policy(RngStream(seed))
    assert obs.shape == (5, 3) and t.shape == (2,)
    assert np.all(obs[:, 2] >= 0)
    assert np.allclose(obs[:, 2], np.sum((obs[:, :2] - t) ** 2, axis=1))
    assert np.max(np.abs(oracles.trilaterate(obs) - t)) <= 1e-8 * max(1.0, np.max(np.abs(t)))


def test_policy_noise_validation():
    with pytest.raises(ContractError):
        g.gen_policy(RngStream(0), noise=-1.0)


def test_kabsch_identity_transform():
    b = g.gen_kabsch(RngStream(3), transform=(1.0, np.eye(2), np.zeros(2)))
    assert np.array_equal(b.K, b.V) and np.array_equal(b.Q, b.targets)


def test_kabsch_translation_only():
    shift = np.array([2.0, -1.0])
    b = g.gen_kabsch(RngStream(4), transform=(1.0, np.eye(2), shift))
    assert np.allclose(b.V - b.K, shift) and np.allclose(b.targets - b.Q, shift)


@given(seeds)
def test_umeyama_recovers_noiseless_similarity(seed):
    rng = RngStream(seed)
    s, R, t = g.random_similarity(rng)
    b = g.gen_kabsch(rng, transform=(s, R, t))
    s2, R2, t2 = oracles.umeyama(b.K, b.V)
    assert abs(s2 - s) <= 1e-8 and np.allclose(R2, R, atol=1e-8) and np.allclose(t2, t, atol=1e-8)
    assert np.allclose(oracles.umeyama_predict(b.K, b.V, b.Q), b.targets, atol=1e-8)


def test_umeyama_rotation_is_proper():
    src = gen(0).standard_normal((6, 2))
    dst = src * np.array([1.0, -1.0])  # a reflection: best proper rotation has det +1
    _, R, _ = oracles.umeyama(src, dst)
    assert np.isclose(np.linalg.det(R), 1.0)


@given(seeds)
def test_anomaly_shapes_and_label_range(seed):
    X, pos = g.gen_anomaly_toy(RngStream(seed), 7, 5)
    assert X.shape == (7, 5) and 0 <= pos < 7


def test_anomaly_infinite_separation_is_trivial():
    for s in range(50):
        X, pos = g.gen_anomaly_toy(RngStream(s), class_sep=1e6)
        assert oracles.nearest_centroid_outlier(X) == pos
        assert oracles.loo_centroid_outlier(X) == pos


def test_anomaly_zero_separation_is_chance():
    hits = np.mean([oracles.loo_centroid_outlier(X) == p
                    for X, p in (g.gen_anomaly_toy(RngStream(s), class_sep=0.0) for s in range(2000))])
    assert abs(hits - 0.1) < 0.03


def test_anomaly_loo_oracle_at_six_sigma():
    assert ex.anomaly_oracle_accuracy(seed=0, sets=1000) >= 0.99


@pytest.mark.parametrize("kw", [dict(class_sep=-1.0), dict(set_size=1)])
def test_anomaly_validation(kw):
    with pytest.raises(ContractError):
        g.gen_anomaly_toy(RngStream(0), **kw)


# -- metrics ------------------------------------------------------------------

def test_pearson_degenerate_is_nan():
    assert math.isnan(metrics.pearson_r([1, 1, 1], [1, 2, 3]))
    assert math.isnan(metrics.pearson_r([1, 2, 3], [4, 4, 4]))


@given(seeds, st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_affine_is_pm_one(seed, a, b):
    x = gen(seed).standard_normal(20)
    assert metrics.pearson_r(x, a * x + b) == pytest.approx(1.0, abs=1e-12)
    assert metrics.pearson_r(x, -a * x + b) == pytest.approx(-1.0, abs=1e-12)


@given(seeds)
def test_pearson_matches_formula(seed):
    x, y = gen(seed).standard_normal((2, 30))
    n = len(x)
    r = (n * np.sum(x * y) - x.sum() * y.sum()) / math.sqrt(
        (n * np.sum(x * x) - x.sum() ** 2) * (n * np.sum(y * y) - y.sum() ** 2))
    assert metrics.pearson_r(x, y) == pytest.approx(r, abs=1e-12)


def test_pearson_validation():
    with pytest.raises(ContractError):
        metrics.pearson_r([1, 2], [1, 2, 3])
    with pytest.raises(ContractError):
        metrics.pearson_r([1], [1])


def test_mse_and_constant_predictor_variance():
    y = gen(1).standard_normal(100)
    assert metrics.mse(np.full_like(y, y.mean()), y) == pytest.approx(np.var(y))
    assert metrics.mse(y, y) == 0.0


def test_accuracy_ties_go_to_lowest_index():
    logits = np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])
    assert metrics.accuracy(logits, [0, 1]) == 1.0
    assert metrics.accuracy(logits, [1, 2]) == 0.0


# -- harness ------------------------------------------------------------------

def test_task_spec_defaults_and_validation():
    assert TaskSpec("policy", N=7).M == 7
    assert (TaskSpec("sine").N, TaskSpec("sine").M) == (10, 200)
    for bad in (dict(kind="nope"), dict(N=0), dict(noise=-1.0)):
        with pytest.raises(ContractError):
            TaskSpec(**bad)


@pytest.mark.parametrize("kind", ["sine", "policy", "kabsch", "scaling", "linreg2d", "anomaly"])
def test_sample_batch_shapes(kind):
    task = TaskSpec(kind)
    b = sample_batch(task, RngStream(0), 3)
    assert len(b) == 3 and b.K.shape[1] == task.N
    assert (b.labels is not None) == (kind == "anomaly")


def test_steps_zero_logs_only_initial_eval():
    res = train(TaskSpec("sine"), ModuleSpec("intention"), steps=0, eval_sets=8)
    assert {r.step for r in res.records} == {0}
    assert {r.metric for r in res.records} == {"eval_loss", "eval_mse"}


def test_equal_seeds_give_equal_logs():
    a = train(TaskSpec("kabsch", seed=5), ModuleSpec("mlp"), steps=20, eval_every=10, eval_sets=16)
    b = train(TaskSpec("kabsch", seed=5), ModuleSpec("mlp"), steps=20, eval_every=10, eval_sets=16)
    assert a.records == b.records


def test_training_reduces_loss():
    res = train(TaskSpec("kabsch", seed=1), ModuleSpec("mlp"), OptimSpec(lr=1e-3), steps=300,
                batch_size=16, eval_every=300, eval_sets=64)
    assert res.last("eval_mse") < res.first("eval_mse")


def test_records_csv_round_trip():
    recs = [RunRecord("sine", "intention", 0, 3, "eval_mse", 0.1 + 0.2), RunRecord("a,b", "m", 1, 0, "x", -1e-300)]
    assert records_from_csv(records_to_csv(recs)) == recs
    with pytest.raises(ContractError):
        records_from_csv("a,b\n")


def test_save_and_load_run(tmp_path):
    task = TaskSpec("sine", seed=2)
    res = train(task, ModuleSpec("intention"), steps=5, eval_every=5, eval_sets=8, out_dir=tmp_path)
    _, spec, model = load_run(tmp_path)
    assert spec == ModuleSpec("intention")
    b = sample_batch(task, RngStream(2).child(STREAM_EVAL), 4)
    assert np.array_equal(model.predict(b.K, b.V, b.Q), res.model.predict(b.K, b.V, b.Q))


def test_save_and_load_block_run(tmp_path):
    task = TaskSpec("anomaly", seed=3, embed_dim=8)
    res = train(task, BlockSpec("informer", layers=1), steps=2, eval_every=2, eval_sets=4, out_dir=tmp_path)
    _, spec, model = load_run(tmp_path)
    assert isinstance(spec, BlockSpec)
    b = sample_batch(task, RngStream(0), 3)
    assert np.array_equal(model(b.K).value, res.model(b.K).value)


def test_non_finite_loss_aborts():
    task = TaskSpec("kabsch")
    model = build_model(task, ModuleSpec("mlp"), RngStream(0, STREAM_INIT))
    next(iter(model.parameters().values())).value[...] = np.nan
    res = train(task, ModuleSpec("mlp"), steps=10, eval_sets=4, model=model)
    assert res.aborted and res.records[-1].metric == "nan_abort"


def test_block_model_only_on_anomaly():
    with pytest.raises(ContractError):
        build_model(TaskSpec("sine"), BlockSpec(), RngStream(0))
    with pytest.raises(ContractError):
        build_model(TaskSpec("anomaly"), ModuleSpec(), RngStream(0))


# -- models -------------------------------------------------------------------

@pytest.mark.parametrize("task,out", [("sine", (4, 200, 1)), ("kabsch", (4, 5, 2)), ("policy", (4, 1, 2)),
                                      ("scaling", (4, 1, 3))])
@pytest.mark.parametrize("kind", ["intention", "attention", "np", "mlp"])
def test_build_regressor_shapes(task, out, kind):
    spec = TaskSpec(task, d=3)
    model = build_model(spec, ModuleSpec(kind), RngStream(0))
    b = sample_batch(spec, RngStream(1), 4)
    y = model.predict(b.K, b.V, b.Q)
    assert y.shape == out == b.targets.shape
    assert np.all(np.isfinite(y))


def test_shared_embedding_is_counted_once():
    model = build_regressor("sine", "intention", RngStream(0))
    ids = [id(p) for p in model.parameters().values()]
    assert len(ids) == len(set(ids))
    assert model.e_Q is model.e_K


def test_unknown_model_kind():
    with pytest.raises(ContractError):
        build_regressor("sine", "lstm", RngStream(0))


def test_fourier_features_approximate_gaussian_kernel():
    emb = FourierEmbedding(1, 20000, RngStream(0), lengthscale=2.0)
    x = np.array([[0.0], [1.0], [3.0]])
    phi = emb(x).value
    exact = np.exp(-((x - x.T) ** 2) / (2 * 4.0))
    assert np.max(np.abs(phi @ phi.T - exact)) < 0.03


@given(seeds, st.integers(1, 6))
def test_identity_embedding_recovers_scaling_target(seed, d):
    x, y, W = g.gen_scaling(RngStream(seed), d)
    model = IntentionRegressor(Identity(d), Identity(1), None, None, AlphaSpec("fixed", 0.0))
    w = model.weights(x, y).value
    assert np.max(np.abs(w - W)) <= 1e-6 * max(1.0, np.max(np.abs(W)))


def test_untrained_linreg_mse():
    med = ex.untrained_linreg_mse(n_seeds=100)
    assert med["intention"] <= 1e-10 and med["attention"] > 0.1


def test_demo_linreg_records():
    recs = ex.demo_linreg(n_seeds=3)
    assert len(recs) == 3 * len(ex.LINREG_MODELS) * 2
    table = ex.median_table(recs)
    assert table["intention"]["pearson_extrap"] > 0.999999


def test_oracle_floor_on_noiseless_tasks():
    assert ex.oracle_mse(TaskSpec("policy"), 32) < 1e-16
    assert ex.oracle_mse(TaskSpec("kabsch"), 32) < 1e-16
    assert ex.noiseless_oracle_mse(TaskSpec("kabsch", noise=0.5), 32) < 1e-16
    with pytest.raises(ContractError):
        ex.oracle_mse(TaskSpec("sine"))


def test_scaling_spec_widths():
    assert ex.ScalingSpec(start_width=2, max_width=16).widths() == [2, 4, 8, 16]
    with pytest.raises(ContractError):
        ex.ScalingSpec(start_width=4, max_width=2)
