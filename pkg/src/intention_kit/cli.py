"""``intention-kit`` command line: experiments, solvers and benchmarks.

Every command takes ``--seed``, ``--out`` and ``--config``. Each output
directory gets the resolved ``config.json``, a run-record ``records.csv`` and
a ``summary.json``; stdout gets one line. Exit status is 0 iff every contract
the command asserts held, 1 otherwise and 2 on usage or config errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import multiprocessing as mp
import os
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench, solvers
from .blocks import BLOCK_KINDS
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .linalg import ContractError, DimensionError, LinAlgError, RngStream, pinv
from .tasks import experiments as ex
from .tasks.train import (RunRecord, STREAM_EVAL, evaluate, load_run, model_name, records_to_csv,
                          sample_batch, train)

log = logging.getLogger("intention_kit")

SEED_ENV = "INTENTION_KIT_SEED"
DEFAULT_OUT = Path("intention-kit-out")


# -- output plumbing -----------------------------------------------------------

def _resolve_seed(args, cfg: ExperimentConfig) -> int:
    if args.seed is not None:
        seed = args.seed
    elif os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={os.environ[SEED_ENV]!r} is not an integer") from None
    else:
        seed = cfg.task.seed
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    return seed


class Output:
    def __init__(self, root: Path, cfg: ExperimentConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.t0 = time.time()

    def write(self, records: Sequence[RunRecord], summary: dict, contracts: dict[str, bool]):
        dump_config(self.cfg, self.root / "config.json")
        (self.root / "records.csv").write_text(records_to_csv(list(records)))
        full = {
            **summary,
            "contracts": contracts,
            "ok": all(contracts.values()),
            "started": _dt.datetime.fromtimestamp(self.t0, _dt.timezone.utc).isoformat(),
            "elapsed_s": round(time.time() - self.t0, 3),
        }
        with open(self.root / "summary.json", "w") as fh:
            json.dump(full, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        return full["ok"]


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _finite(x: float) -> bool:
    return bool(np.isfinite(x))


# -- commands --------------------------------------------------------------------

def cmd_demo_linreg(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    records = ex.demo_linreg(args.seed, n_seeds=args.n_seeds)
    table = ex.median_table(records)
    contracts = {
        "all_models_reported": set(table) == set(ex.LINREG_MODELS),
        "medians_finite": all(_finite(v) for row in table.values() for v in row.values()),
    }
    ok = out.write(records, {"command": "demo-linreg", "median_pearson": table}, contracts)
    it = table["intention"]
    line = (f"demo-linreg: intention r interp={it['pearson_interp']:.6f} extrap={it['pearson_extrap']:.6f}; "
            f"attention extrap={table['attention']['pearson_extrap']:.3f}")
    return ok, line


def cmd_scaling(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    spec = cfg.scaling
    table, records = ex.scaling_experiment(spec, args.seed)
    claims = scaling_claims(table)
    ok = out.write(records, {"command": "scaling", "minimal_width": table, "claims": claims},
                   {"searched_every_cell": all(len(v) == len(spec.d_values) for v in table.values())})
    return ok, "scaling: " + "; ".join(f"{k} {list(v.values())}" for k, v in table.items())


def scaling_claims(table: dict) -> dict:
    """Intention width constant and small, MLP width strictly increasing in d."""
    res = {}
    if "intention" in table:
        w = list(table["intention"].values())
        res["intention_constant"] = None not in w and len(set(w)) == 1 and w[0] <= 32
    if "mlp" in table:
        w = list(table["mlp"].values())
        res["mlp_increasing"] = None not in w and all(a < b for a, b in zip(w, w[1:]))
    return res


def _train_one(job: tuple) -> tuple[list, bool, Optional[str]]:
    cfg, seed, ckpt = job
    task = dataclasses.replace(cfg.task, seed=seed)
    res = train(task, cfg.model_spec(), cfg.optim, steps=cfg.steps, batch_size=cfg.batch_size,
                eval_every=cfg.eval_every, eval_sets=cfg.eval_sets, out_dir=ckpt)
    return res.records, res.aborted, str(ckpt)


def cmd_train(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    if args.task and args.task != cfg.task.kind:
        # sizes and noise follow the new task's defaults, not the configured one's
        cfg.task = ex.default_task(args.task, args.seed, d=cfg.task.d, embed_dim=cfg.task.embed_dim)
    if args.model:
        if cfg.task.kind == "anomaly":
            cfg.block = dataclasses.replace(cfg.block, kind=args.model)
        else:
            cfg.model = dataclasses.replace(cfg.model, kind=args.model)
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.__post_init__()
    k = args.parallel_seeds
    if k < 1:
        raise ConfigError("--parallel-seeds must be >= 1")
    seeds = [args.seed + i for i in range(k)]
    ckpts = [out.root / "checkpoint"] if k == 1 else [out.root / f"checkpoint-seed{s}" for s in seeds]
    jobs = [(cfg, s, c) for s, c in zip(seeds, ckpts)]
    if k == 1:
        results = [_train_one(jobs[0])]
    else:
        # independent single-threaded trainers; spawn keeps BLAS state out of the children
        with mp.get_context("spawn").Pool(min(k, os.cpu_count() or 1)) as pool:
            results = pool.map(_train_one, jobs)
    records = [r for recs, _, _ in results for r in recs]
    aborted = [s for s, (_, a, _) in zip(seeds, results) if a]
    final = {}
    for s, (recs, _, _) in zip(seeds, results):
        last = {}
        for r in recs:
            if r.metric.startswith("eval_") or r.metric == "train_loss":
                last[r.metric] = r.value
        final[str(s)] = last
    summary = {"command": "train", "task": cfg.task.kind, "model": model_name(cfg.model_spec()),
               "seeds": seeds, "final": final, "checkpoints": [c for _, _, c in results],
               "nan_aborted_seeds": aborted}
    ok = out.write(records, summary, {"no_nan_abort": not aborted,
                                      "checkpoints_written": all(Path(c, "checkpoint.json").exists()
                                                                 for c in ckpts)})
    metric = "eval_accuracy" if cfg.task.kind == "anomaly" else "eval_mse"
    vals = [final[str(s)].get(metric, float("nan")) for s in seeds]
    return ok, (f"train {cfg.task.kind}/{summary['model']} steps={cfg.steps} seeds={len(seeds)}: "
                f"{metric} median={np.median(vals):.4g}")


def cmd_eval(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    task, spec, model = load_run(Path(args.checkpoint))
    if args.task and args.task != task.kind:
        raise ConfigError(f"checkpoint was trained on {task.kind!r}, not {args.task!r}")
    cfg.task, cfg.steps = task, 0
    if task.kind == "anomaly":
        cfg.block = spec
    else:
        cfg.model = spec
    # the evaluation stream of the training seed reproduces the training-time eval sets
    batch = sample_batch(task, RngStream(task.seed).child(STREAM_EVAL), cfg.eval_sets)
    metrics = evaluate(model, batch)
    name = model_name(spec)
    records = [RunRecord(task.kind, name, task.seed, 0, k, v) for k, v in sorted(metrics.items())]
    ok = out.write(records, {"command": "eval", "checkpoint": str(args.checkpoint), "metrics": metrics},
                   {"metrics_finite": all(_finite(v) for v in metrics.values())})
    return ok, f"eval {task.kind}/{name}: " + " ".join(f"{k}={v:.4g}" for k, v in sorted(metrics.items()))


def read_numeric_csv(path: str) -> np.ndarray:
    """Numeric CSV with an optional header row."""
    with open(path) as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    data = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if data.size == 0:
        raise ConfigError(f"{path}: no data rows")
    return data


def cmd_solve(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    data = read_numeric_csv(args.csv)
    n_meta = 2 if args.weights else 1
    if data.shape[1] <= n_meta:
        raise ConfigError(f"{args.csv}: need feature columns before label{' and weight' if args.weights else ''}")
    X = data[:, : data.shape[1] - n_meta]
    y = data[:, data.shape[1] - n_meta]
    weights = data[:, -1] if args.weights else None
    bias_index = args.bias_index
    if args.add_bias:
        X = np.hstack([X, np.ones((X.shape[0], 1))])
        bias_index = X.shape[1] - 1
    labeled = solvers.LabeledData(X, y, weights, bias_index)
    w = solvers.fit(args.kind, labeled, args.C)
    generic = solvers.fit_generic(args.kind, labeled, args.C)
    result = {"kind": args.kind, "C": args.C, "bias_index": bias_index, "w": w.tolist()}
    contracts = {"finite": bool(np.all(np.isfinite(w))),
                 "matches_generic_path": bool(np.allclose(w, generic, rtol=1e-8, atol=1e-10))}
    if args.constraints:
        # rows: constraint coefficients..., bound  meaning  coefᵀw >= bound
        cons = read_numeric_csv(args.constraints)
        if cons.shape[1] != X.shape[1] + 1:
            raise DimensionError(f"constraint rows need {X.shape[1]} coefficients plus a bound")
        sigma, _, _ = solvers.solver_system(args.kind, labeled, args.C)
        Z = pinv(sigma)
        C_mat, c = cons[:, :-1].T, cons[:, -1]
        violated = solvers.violated_constraints(w, C_mat, c)
        w_proj = solvers.constrained_project(w, Z, C_mat, c)
        result.update(w_unconstrained=w.tolist(), w=w_proj.tolist(), violated=violated.tolist())
        if violated.size:
            contracts["projection_on_bounds"] = bool(
                np.allclose(C_mat[:, violated].T @ w_proj, c[violated], atol=1e-8))
        w = w_proj
    with open(out.root / "weights.json", "w") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    records = [RunRecord("solve", args.kind, args.seed, 0, f"w{i}", v) for i, v in enumerate(w)]
    ok = out.write(records, {"command": "solve", **result}, contracts)
    return ok, f"solve {args.kind}: w=" + json.dumps([round(float(v), 6) for v in w])


def cmd_bench_timing(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    bs = cfg.bench
    reps = args.reps if args.reps is not None else bs.reps
    warmup = args.warmup if args.warmup is not None else bs.warmup
    if args.grid:
        grid = bench.BenchGrid.parse(args.grid, reps, warmup)
    else:
        grid = bench.BenchGrid(tuple(bs.N_values), tuple(bs.d_values), reps, warmup)
    cfg.bench = dataclasses.replace(bs, N_values=list(grid.N_values), d_values=list(grid.d_values),
                                    reps=reps, warmup=warmup)
    rng = RngStream(args.seed)
    att = bench.time_forward("attention", grid, rng.child(1))
    itn = bench.time_forward("intention", grid, rng.child(2))
    ratio = bench.slowdown_ratio(att, itn)
    (out.root / "timings.csv").write_text(bench.results_to_csv(att + itn))
    summary = {"command": "bench-timing", "slowdown": bench.quantiles(ratio),
               "cells": [r.summary() for r in att + itn]}
    checks = [bench.check("slowdown_band", 0.5 <= np.median(ratio) <= 10.0,
                          f"median slowdown {np.median(ratio):.3g} outside [0.5, 10]", args.strict_bench)]
    if not args.no_slope:
        sgrid = bench.BenchGrid(tuple(bs.slope_N), (bs.slope_d,), max(3, min(reps, 5)), warmup)
        slopes = {}
        for i, op in enumerate(bench.BENCH_OPS):
            res = bench.time_forward(op, sgrid, rng.child(10 + i))
            slopes[op] = bench.loglog_slope(res, bs.slope_d)
            checks.append(bench.check(f"slope_{op}", 1.6 <= slopes[op] <= 2.6,
                                      f"{op} log-log slope {slopes[op]:.3g} outside [1.6, 2.6]",
                                      args.strict_bench))
        summary["loglog_slope"] = slopes
    summary["checks"] = [dataclasses.asdict(c) for c in checks]
    records = [RunRecord("bench", r.op, args.seed, 0, f"median_ns_N{r.N}_d{r.d}", r.median) for r in att + itn]
    # timing checks only fail the exit status under --strict-bench, where check() already raised
    ok = out.write(records, summary, {"branch_rule": True})
    soft = sum(not c.passed for c in checks)
    return ok, (f"bench-timing: median slowdown {np.median(ratio):.3g} over {len(grid.cells())} cells"
                + (f", {soft} soft check(s) failed" if soft else ""))


def cmd_bench_variance(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    trials = args.trials if args.trials is not None else cfg.bench.variance_trials
    rng = RngStream(args.seed)
    probes = [("scaled", 32, d) for d in (128, 256, 512)] + [("unscaled", 16, 4096)]
    probes += [("unscaled", 32, 32), ("scaled-regularized", 32, 32)]
    records, var = [], {}
    for i, (variant, N, d) in enumerate(probes):
        v = bench.variance_probe(variant, N, d, trials, rng.child(i), alpha_param=1.0)
        var[f"{variant}_N{N}_d{d}"] = v
        records.append(RunRecord("variance", variant, args.seed, 0, f"var_N{N}_d{d}", v))
    claims = {
        "scaled_near_one": all(0.5 <= var[f"scaled_N32_d{d}"] <= 2.0 for d in (128, 256, 512)),
        "unscaled_vanishes": var["unscaled_N16_d4096"] < 0.05,
        "regularized_bounded": var["scaled-regularized_N32_d32"] < 10.0,
    }
    ok = out.write(records, {"command": "bench-variance", "trials": trials, "variance": var, "claims": claims},
                   {"variances_finite": all(_finite(v) for v in var.values())})
    return ok, "bench-variance: " + " ".join(f"{k}={v:.3g}" for k, v in var.items())


def tests_dir() -> Path:
    return Path(__file__).resolve().parents[2] / "tests"


def cmd_selftest(args, cfg: ExperimentConfig, out: Output) -> tuple[bool, str]:
    where = tests_dir()
    if not where.is_dir():
        raise ConfigError(f"test suite not found at {where}")
    cmd = [sys.executable, "-m", "pytest", "-q", str(where)]
    if not args.all:
        cmd += ["-m", "not slow and not acceptance"]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    (out.root / "pytest.txt").write_text(proc.stdout + proc.stderr)
    tail = (proc.stdout.strip().splitlines() or ["no output"])[-1]
    ok = out.write([], {"command": "selftest", "pytest_args": cmd[3:], "returncode": proc.returncode,
                        "result": tail}, {"pytest_passed": proc.returncode == 0})
    return ok, f"selftest: {tail}"


COMMANDS = {
    "demo-linreg": cmd_demo_linreg,
    "scaling": cmd_scaling,
    "train": cmd_train,
    "eval": cmd_eval,
    "solve": cmd_solve,
    "bench-timing": cmd_bench_timing,
    "bench-variance": cmd_bench_variance,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intention-kit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=None, help=f"run seed (falls back to ${SEED_ENV})")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        sp.add_argument("--config", default=None, help="JSON experiment config")
        return sp

    sp = add("demo-linreg", "untrained Pearson r on 2-D linear regression")
    sp.add_argument("--n-seeds", type=int, default=100)
    add("scaling", "minimal width search over d")
    sp = add("train", "train one model on one task")
    sp.add_argument("--task", default=None)
    sp.add_argument("--model", default=None, help=f"module kind, or a block kind for anomaly {BLOCK_KINDS}")
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--parallel-seeds", type=int, default=1)
    sp = add("eval", "evaluate a saved checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", default=None)
    sp = add("solve", "closed-form solver on a CSV of features,label[,weight]")
    sp.add_argument("kind", choices=solvers.SOLVER_KINDS)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--C", type=float, default=0.0)
    sp.add_argument("--weights", action="store_true", help="last column holds sample weights")
    sp.add_argument("--bias-index", type=int, default=None)
    sp.add_argument("--add-bias", action="store_true", help="append a ones column as the bias")
    sp.add_argument("--constraints", default=None, help="CSV rows coef...,bound for coefᵀw >= bound")
    sp = add("bench-timing", "attention vs intention wall clock")
    sp.add_argument("--grid", default=None, help='e.g. "64,128,256,512" or "64,128x64,256"')
    sp.add_argument("--reps", type=int, default=None)
    sp.add_argument("--warmup", type=int, default=None)
    sp.add_argument("--strict-bench", action="store_true")
    sp.add_argument("--no-slope", action="store_true", help="skip the log-log slope runs")
    sp = add("bench-variance", "entry variance of the scaled intention map")
    sp.add_argument("--trials", type=int, default=None)
    sp = add("selftest", "run the test suite")
    sp.add_argument("--all", action="store_true", help="include slow tests and the acceptance suite")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.seed = _resolve_seed(args, cfg)
        cfg.task = dataclasses.replace(cfg.task, seed=args.seed)
        out = Output(args.out if args.out is not None else DEFAULT_OUT / args.command, cfg)
        ok, line = COMMANDS[args.command](args, cfg, out)
    except (ConfigError, ContractError, DimensionError, FileNotFoundError, KeyError) as exc:
        print(f"intention-kit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (AssertionError, LinAlgError) as exc:
        print(f"intention-kit {args.command}: contract failed: {exc}", file=sys.stderr)
        return 1
    print(line + ("" if ok else "  [CONTRACT FAILED]"))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
