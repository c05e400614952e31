"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
repeated in the terminal summary. Set ``INTENTION_KIT_STRICT_BENCH=1`` to make
the timing criterion fail instead of warn.
"""

import os

import numpy as np
import pytest

from gradcheck import intention_module_grad_error, op_grad_errors
from kvq_checks import (KVQ_OPS, block_permutation_error, permutation_error, primal_dual_error, random_batch,
                        rng_for, sweep_ok)
from solver_checks import lda_identity_gap, lssvm_accuracy, projection_gaps, replication_gap, ridge_vs_gd
from intention_kit import bench
from intention_kit.blocks import BLOCK_KINDS
from intention_kit.cli import scaling_claims
from intention_kit.kvq import KvqBatch, intention
from intention_kit.linalg import RngStream
from intention_kit.tasks import experiments as ex
from intention_kit.tasks.train import TaskSpec

pytestmark = pytest.mark.acceptance

LINES: list[str] = []


def report(n: int, name: str, passed: bool, detail: str, soft: bool = False) -> bool:
    status = "PASS" if passed else ("WARN" if soft else "FAIL")
    line = f"[{n:2d}] {status} {name}: {detail}"
    LINES.append(line)
    print(line)
    return passed


def test_01_least_squares_witness():
    errs = []
    for kappa in (0.5, 1.0, 2.0, 4.0):
        z = intention(KvqBatch([[kappa]], [[1.0]], [[1.0]]), 0.0)
        errs.append(abs(z[0, 0] - 1.0 / kappa))
    assert report(1, "scalar witness 1/kappa", max(errs) <= 1e-12, f"max error {max(errs):.2e}")


def test_02_alpha_limits():
    fails = {"intention->linear_attention": 0, "sigma_intention->attention": 0}
    for i in range(50):
        b = random_batch(rng_for(i), 8, 4, 3)
        fails["intention->linear_attention"] += not sweep_ok(b, sigma=False)
        fails["sigma_intention->attention"] += not sweep_ok(b, sigma=True)
    ok = not any(fails.values())
    assert report(2, "alpha limits over 50 instances", ok, f"failures {fails}")


def test_03_permutation_equivariance():
    op_worst = max(permutation_error(op, rng_for(1000 + i)) for op in KVQ_OPS.values() for i in range(100))
    block_worst = max(block_permutation_error(kind, 2000 + i) for kind in BLOCK_KINDS for i in range(100))
    ok = op_worst <= 1e-10 and block_worst <= 1e-8
    assert report(3, "permutation equivariance", ok,
                  f"ops worst {op_worst:.2e} (1e-10), blocks worst {block_worst:.2e} (1e-8)")


def test_04_primal_dual():
    worst = {a: max(primal_dual_error(rng_for(3000 + i), a) for i in range(100)) for a in (0.0, 0.1)}
    ok = all(v <= 1e-8 for v in worst.values())
    assert report(4, "primal/dual agreement", ok, "worst relative error " + ", ".join(f"alpha={a} {v:.1e}" for a, v in worst.items()))


def test_05_solver_oracles():
    gd = max(ridge_vs_gd(s) for s in range(10))
    rep = max(replication_gap(s) for s in range(10))
    acc = min(lssvm_accuracy(s) for s in range(10))
    lda = max(lda_identity_gap(s) for s in range(10))
    eq, noop = (max(v) for v in zip(*(projection_gaps(s) for s in range(10))))
    ok = gd <= 1e-4 and rep <= 1e-10 and acc == 1.0 and lda <= 1e-10 and eq <= 1e-8 and noop == 0.0
    assert report(5, "solver oracle equivalence", ok,
                  f"ridge-gd {gd:.1e}, replication {rep:.1e}, lssvm acc {acc:.3f}, lda {lda:.1e}, "
                  f"projection eq {eq:.1e}, no-op change {noop:.1e}")


def test_06_gradient_checks():
    op_worst = op_grad_errors(0, instances=20)
    module_worst = max(intention_module_grad_error(s) for s in range(20))
    worst_op = max(op_worst, key=op_worst.get)
    ok = op_worst[worst_op] <= 1e-4 and module_worst <= 1e-4
    assert report(6, "finite-difference gradients", ok,
                  f"{len(op_worst)} ops worst {op_worst[worst_op]:.1e} ({worst_op}), module {module_worst:.1e}")


def test_07_untrained_inductive_bias():
    table = ex.median_table(ex.demo_linreg(seed=0, n_seeds=100))
    ri, re = table["intention"]["pearson_interp"], table["intention"]["pearson_extrap"]
    ra = table["attention"]["pearson_extrap"]
    ok = ri >= 0.999999 and re >= 0.999999 and ra <= 0.9
    assert report(7, "untrained linear regression", ok,
                  f"intention r interp {ri:.7f} extrap {re:.7f}, attention extrap {ra:.3f}")


def test_08_sine_few_shot():
    task = TaskSpec("sine", seed=0)
    trained = ex.train_regressor(task, "intention", steps=5000)
    nproc = ex.train_regressor(task, "np", steps=5000)
    untrained, after, np_mse = trained.first("eval_mse"), trained.last("eval_mse"), nproc.last("eval_mse")
    ok = after <= 0.5 * untrained and untrained <= np_mse
    assert report(8, "sine 10-shot", ok,
                  f"intention untrained {untrained:.4f} trained {after:.4f}, trained NP {np_mse:.4f}")


def test_09_policy_distillation():
    task = TaskSpec("policy", seed=0)
    itn = ex.train_regressor(task, "intention", steps=10000).last("eval_mse")
    mlp = ex.train_regressor(task, "mlp", steps=10000).last("eval_mse")
    floor = ex.oracle_mse(task)
    vs_mlp, vs_floor = itn <= 0.5 * mlp, itn <= 10 * floor
    assert report(9, "policy distillation", vs_mlp and vs_floor,
                  f"intention {itn:.3g} vs 0.5*mlp {0.5 * mlp:.3g} ({'ok' if vs_mlp else 'no'}), "
                  f"vs 10*trilateration floor {10 * floor:.3g} ({'ok' if vs_floor else 'no'})")


def test_10_kabsch():
    task = ex.default_task("kabsch", seed=0)
    mses = {k: ex.train_regressor(task, k, steps=3000).last("eval_mse") for k in ("intention", "mlp")}
    clean = ex.noiseless_oracle_mse(task)
    fitted = ex.oracle_mse(task)
    ok = mses["intention"] <= 0.2 * mses["mlp"] and all(max(clean, fitted) <= v for v in mses.values())
    assert report(10, "kabsch", ok,
                  f"intention {mses['intention']:.4f}, mlp {mses['mlp']:.4f}, "
                  f"umeyama noiseless {clean:.1e}, on noisy sets {fitted:.4f}")


def test_11_anomaly_toy():
    acc = {L: ex.anomaly_run(L, epochs=10, seed=0).last("eval_accuracy") for L in (1, 4)}
    ok = acc[1] >= 0.90 and acc[4] >= acc[1] - 0.01
    assert report(11, "anomaly toy", ok, f"1-layer {acc[1]:.3f}, 4-layer {acc[4]:.3f}")


def test_12_scaling():
    table, _ = ex.scaling_experiment(ex.ScalingSpec(), seed=0)
    claims = scaling_claims(table)
    ok = all(claims.values())
    assert report(12, "minimal width vs d", ok,
                  f"intention {list(table['intention'].values())}, mlp {list(table['mlp'].values())}")


def test_13_normalization_variance():
    rng = RngStream(0)
    scaled = {d: bench.variance_probe("scaled", 32, d, 200, rng.child(d)) for d in (128, 256, 512)}
    unscaled = bench.variance_probe("unscaled", 16, 4096, 200, rng.child(1))
    ok = all(0.5 <= v <= 2.0 for v in scaled.values()) and unscaled < 0.05
    assert report(13, "normalisation variance", ok,
                  "scaled " + ", ".join(f"d{d} {v:.3f}" for d, v in scaled.items())
                  + f"; unscaled d4096 {unscaled:.2e}")


def test_14_timing_soft():
    strict = os.environ.get("INTENTION_KIT_STRICT_BENCH") == "1"
    rng = RngStream(0)
    grid = bench.BenchGrid((64, 128, 256, 512), (64, 128, 256, 512), reps=15, warmup=2)
    ratio = np.median(bench.slowdown_ratio(bench.time_forward("attention", grid, rng.child(1)),
                                           bench.time_forward("intention", grid, rng.child(2))))
    sgrid = bench.BenchGrid((128, 256, 512, 1024), (1024,), reps=5, warmup=2)
    slope = bench.loglog_slope(bench.time_forward("intention", sgrid, rng.child(3)), 1024)
    ok = 0.5 <= ratio <= 10.0 and 1.6 <= slope <= 2.6
    report(14, "timing (soft)", ok, f"median slowdown {ratio:.3g} in [0.5, 10], "
           f"log-log slope in N {slope:.3g} in [1.6, 2.6]", soft=not strict)
    if strict:
        assert ok
