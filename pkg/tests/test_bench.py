import logging

import numpy as np
import pytest

from intention_kit import bench
from intention_kit.bench import BenchGrid, BenchResult
from intention_kit.linalg import ContractError, DimensionError, RngStream


@pytest.mark.parametrize("kw", [dict(N_values=()), dict(d_values=(0,)), dict(reps=2), dict(warmup=0)])
def test_grid_validation(kw):
    with pytest.raises(ContractError):
        BenchGrid(**kw)


def test_grid_parse():
    g = BenchGrid.parse("64,128x32,256", reps=5)
    assert g.cells() == [(64, 32), (64, 256), (128, 32), (128, 256)] and g.reps == 5
    assert BenchGrid.parse("8,16").d_values == (8, 16)
    with pytest.raises(ContractError):
        BenchGrid.parse("1x2x3")


def test_result_rejects_non_positive_timings():
    with pytest.raises(ContractError):
        BenchResult("attention", 2, 2, [5, 0])


SMALL = BenchGrid((16, 64, 256), (16,), reps=5, warmup=1)


def test_timings_positive_and_branch_recorded():
    res = bench.time_forward("intention", SMALL, RngStream(0))
    assert all(t > 0 for r in res for t in r.ns)
    assert [r.branch for r in res] == ["dual", "primal", "primal"]


def test_branch_at_equal_sizes_is_dual():
    (r,) = bench.time_forward("intention", BenchGrid((32,), (32,), reps=3), RngStream(0))
    assert r.branch == "dual"


def test_timing_grows_with_N():
    # soft: the N=256 cell does roughly 16x the work of N=16
    res = bench.time_forward("attention", SMALL, RngStream(1))
    assert res[-1].median > res[0].median


def test_self_slowdown_is_near_one():
    a = bench.time_forward("attention", BenchGrid((64,), (64,), reps=31), RngStream(2))
    b = bench.time_forward("attention", BenchGrid((64,), (64,), reps=31), RngStream(3))
    q = bench.quantiles(bench.slowdown_ratio(a, b))
    assert 0.5 <= q["median"] <= 2.0 and q["n"] == 31


def test_one_cell_ratio_is_exact():
    a = [BenchResult("attention", 4, 4, [10, 20, 40])]
    b = [BenchResult("intention", 4, 4, [20, 20, 20])]
    assert np.allclose(bench.slowdown_ratio(a, b), [2.0, 1.0, 0.5])


def test_grid_mismatch():
    a = [BenchResult("attention", 4, 4, [1, 1, 1])]
    with pytest.raises(DimensionError):
        bench.slowdown_ratio(a, [BenchResult("intention", 8, 4, [1, 1, 1])])
    with pytest.raises(DimensionError):
        bench.slowdown_ratio(a, [BenchResult("intention", 4, 4, [1, 1])])


def test_loglog_slope_of_power_law():
    res = [BenchResult("x", n, 8, [3.0 * n ** 2]) for n in (16, 32, 64, 128)]
    assert bench.loglog_slope(res, 8) == pytest.approx(2.0)
    with pytest.raises(ContractError):
        bench.loglog_slope(res[:1], 8)


def test_csv_layout():
    text = bench.results_to_csv([BenchResult("attention", 4, 8, [5, 6])])
    assert text.splitlines() == ["op,N,d,rep,ns", "attention,4,8,0,5", "attention,4,8,1,6"]


def test_unknown_op():
    with pytest.raises(ContractError):
        bench.time_forward("conv", SMALL, RngStream(0))


def test_variance_probe_bounds():
    v = bench.variance_probe("scaled", 32, 256, 100, RngStream(0))
    assert 0.5 <= v <= 2.0
    assert bench.variance_probe("unscaled", 16, 4096, 100, RngStream(1)) < 0.05
    with pytest.raises(ContractError):
        bench.variance_probe("scaled", 32, 256, 10, RngStream(0))
    with pytest.raises(ContractError):
        bench.variance_probe("weird", 32, 256, 100, RngStream(0))


def test_soft_check_warns_unless_strict(caplog):
    with caplog.at_level(logging.WARNING):
        c = bench.check("slope", False, "too steep", strict=False)
    assert not c.passed and "too steep" in caplog.text
    with pytest.raises(AssertionError):
        bench.check("slope", False, "too steep", strict=True)
