"""Training and evaluation harness shared by every experiment."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .. import autodiff as ad
from ..blocks import BlockSpec, Optimizer, OptimSpec, SetScorer
from ..kvq import AlphaSpec, ModuleSpec
from ..linalg import ContractError, RngStream
from . import generators as gen
from . import metrics
from .models import KvqModel, build_regressor

log = logging.getLogger(__name__)

TASK_KINDS = ("linreg2d", "scaling", "sine", "policy", "kabsch", "anomaly")
RECORD_HEADER = ("task", "model", "seed", "step", "metric", "value")

# (N, M) per task when a TaskSpec leaves them unset
_DEFAULT_SIZES = {
    "linreg2d": (20, 400),
    "scaling": (10, 10),
    "sine": (10, 200),
    "policy": (5, 5),
    "kabsch": (5, 5),
    "anomaly": (10, 1),
}

# stream ids under the run seed
STREAM_INIT, STREAM_TRAIN, STREAM_EVAL, STREAM_DROPOUT = 1, 2, 3, 4


@dataclass
class TaskSpec:
    kind: str = "sine"
    N: Optional[int] = None
    M: Optional[int] = None
    noise: float = 0.0
    seed: int = 0
    d: int = 2
    embed_dim: int = 32
    class_sep: float = 6.0
    train_sets: int = 0  # 0 draws fresh sets every step

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        n, m = _DEFAULT_SIZES[self.kind]
        self.N = n if self.N is None else int(self.N)
        self.M = m if self.M is None else int(self.M)
        if self.N < 1 or self.M < 1:
            raise ContractError("N and M must be >= 1")
        if self.noise < 0:
            raise ContractError("noise must be non-negative")
        if self.d < 1 or self.embed_dim < 1 or self.train_sets < 0:
            raise ContractError("d, embed_dim must be >= 1 and train_sets >= 0")
        if self.kind in ("policy", "scaling") and self.M != self.N:
            # queries are the observations themselves
            self.M = self.N

    @property
    def model_task(self) -> str:
        return self.kind


@dataclass
class Batch:
    """Stacked task instances. ``labels`` is set for classification tasks."""

    K: np.ndarray
    V: np.ndarray
    Q: np.ndarray
    targets: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return self.K.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(self.K[idx], self.V[idx], self.Q[idx], self.targets[idx],
                     None if self.labels is None else self.labels[idx])


def _one(task: TaskSpec, rng: RngStream):
    k = task.kind
    if k == "sine":
        b = gen.gen_sine(rng, task.N, task.M)
        return b.K, b.V, b.Q, b.targets
    if k == "kabsch":
        b = gen.gen_kabsch(rng, task.N, task.M, task.noise)
        return b.K, b.V, b.Q, b.targets
    if k == "policy":
        obs, t = gen.gen_policy(rng, task.N, task.noise)
        return obs, obs, obs, t[None, :]
    if k == "scaling":
        x, y, W = gen.gen_scaling(rng, task.d, task.N)
        if task.noise:
            y = y + task.noise * rng.generator.standard_normal(y.shape)
        return x, y, x, W.T
    if k == "linreg2d":
        b_in, _ = gen.gen_linreg2d(rng, task.N, task.M, 1)
        return b_in.K, b_in.V, b_in.Q, b_in.targets
    X, pos = gen.gen_anomaly_toy(rng, task.N, task.embed_dim, task.class_sep)
    return X, X, X, np.array([[pos]], dtype=np.float64)


def sample_batch(task: TaskSpec, rng: RngStream, size: int) -> Batch:
    """``size`` independent task instances stacked on a leading axis."""
    if size < 1:
        raise ContractError("batch size must be >= 1")
    parts = [_one(task, rng) for _ in range(size)]
    K, V, Q, T = (np.stack(p) for p in zip(*parts))
    labels = T[:, 0, 0].astype(np.int64) if task.kind == "anomaly" else None
    return Batch(K, V, Q, T, labels)


# -- models -------------------------------------------------------------------

Model = Union[KvqModel, SetScorer]
ModelSpecLike = Union[ModuleSpec, BlockSpec]


def model_name(spec: ModelSpecLike) -> str:
    if isinstance(spec, BlockSpec):
        return f"{spec.kind}-{spec.layers}L"
    return spec.kind


def build_model(task: TaskSpec, spec: ModelSpecLike, rng: RngStream) -> Model:
    if task.kind == "anomaly":
        if not isinstance(spec, BlockSpec):
            raise ContractError("the anomaly task needs a BlockSpec model")
        return SetScorer(spec, task.embed_dim, rng)
    if isinstance(spec, BlockSpec):
        raise ContractError(f"block models only run on the anomaly task, not {task.kind!r}")
    # a default AlphaSpec defers to the per-task choice in build_regressor
    alpha = spec.alpha if spec.alpha != AlphaSpec() else None
    return build_regressor(task.kind, spec.kind, rng, spec.widths, spec.heads, alpha, d=task.d, N=task.N)


def forward(model: Model, batch: Batch, dropout_rng: Optional[RngStream] = None) -> ad.Node:
    if isinstance(model, SetScorer):
        return model(batch.K, dropout_rng)
    return model(batch.K, batch.V, batch.Q)


def batch_loss(model: Model, batch: Batch, dropout_rng: Optional[RngStream] = None) -> ad.Node:
    out = forward(model, batch, dropout_rng)
    if batch.labels is not None:
        return ad.loss_softmax_xent(out, batch.labels)
    return ad.loss_mse(out, batch.targets)


def eval_mse(model: Model, batch: Batch) -> float:
    return metrics.mse(forward(model, batch).value, batch.targets)


def eval_accuracy(model: Model, batch: Batch) -> float:
    if batch.labels is None:
        raise ContractError("accuracy needs class labels")
    return metrics.accuracy(forward(model, batch).value, batch.labels)


def evaluate(model: Model, batch: Batch, chunk: int = 256) -> dict[str, float]:
    """Eval metrics over ``batch`` in chunks; loss is averaged per instance."""
    n = len(batch)
    totals: dict[str, float] = {}
    for lo in range(0, n, chunk):
        part = batch.subset(slice(lo, lo + chunk))
        w = len(part) / n
        vals = {"eval_loss": float(batch_loss(model, part).value[0, 0])}
        if part.labels is not None:
            vals["eval_accuracy"] = eval_accuracy(model, part)
        else:
            vals["eval_mse"] = eval_mse(model, part)
        for k, v in vals.items():
            totals[k] = totals.get(k, 0.0) + w * v
    return totals


# -- run log ------------------------------------------------------------------

@dataclass(frozen=True)
class RunRecord:
    task: str
    model: str
    seed: int
    step: int
    metric: str
    value: float


def records_to_csv(records: list[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow([r.task, r.model, r.seed, r.step, r.metric, repr(float(r.value))])
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != RECORD_HEADER:
        raise ContractError("not a run-record CSV")
    return [RunRecord(t, m, int(s), int(st), k, float(v)) for t, m, s, st, k, v in rows[1:]]


@dataclass
class TrainResult:
    records: list[RunRecord]
    model: Model
    aborted: bool = False

    def last(self, metric: str) -> float:
        for r in reversed(self.records):
            if r.metric == metric:
                return r.value
        raise KeyError(metric)

    def first(self, metric: str) -> float:
        for r in self.records:
            if r.metric == metric:
                return r.value
        raise KeyError(metric)


def _spec_dict(spec: ModelSpecLike) -> dict:
    return {"type": "block" if isinstance(spec, BlockSpec) else "module", **asdict(spec)}


def spec_from_dict(obj: dict) -> ModelSpecLike:
    obj = dict(obj)
    kind = obj.pop("type", "module")
    return BlockSpec(**obj) if kind == "block" else ModuleSpec(**obj)


def save_run(path: Path, task: TaskSpec, spec: ModelSpecLike, model: Model):
    """Checkpoint: parameters plus the specs needed to rebuild the model."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(model.parameters(), path / "checkpoint.json")
    with open(path / "model.json", "w") as fh:
        json.dump({"task": asdict(task), "model": _spec_dict(spec)}, fh, indent=2, sort_keys=True)


def load_run(path: Path) -> tuple[TaskSpec, ModelSpecLike, Model]:
    path = Path(path)
    with open(path / "model.json") as fh:
        meta = json.load(fh)
    task = TaskSpec(**meta["task"])
    spec = spec_from_dict(meta["model"])
    model = build_model(task, spec, RngStream(task.seed, STREAM_INIT))
    ad.load_checkpoint(model.parameters(), path / "checkpoint.json")
    return task, spec, model


def train(task: TaskSpec, spec: ModelSpecLike, optim: OptimSpec = OptimSpec(), steps: int = 1000,
          batch_size: int = 8, eval_every: int = 100, eval_sets: int = 256,
          out_dir: Optional[Path] = None, model: Optional[Model] = None) -> TrainResult:
    """Train ``spec`` on ``task``; evaluation runs at step 0 and every ``eval_every`` steps.

    A non-finite training loss stops the run with a ``nan_abort`` record.
    """
    if steps < 0 or eval_every < 1:
        raise ContractError("steps must be >= 0 and eval_every >= 1")
    seed = task.seed
    name = model_name(spec)
    root = RngStream(seed)
    if model is None:
        model = build_model(task, spec, RngStream(seed, STREAM_INIT))
    data_rng = root.child(STREAM_TRAIN)
    drop_rng = root.child(STREAM_DROPOUT)
    eval_batch = sample_batch(task, root.child(STREAM_EVAL), eval_sets)
    pool = sample_batch(task, data_rng, task.train_sets) if task.train_sets else None
    order = np.empty(0, dtype=np.int64)

    params = model.parameters()
    opt = Optimizer(params, optim)
    records: list[RunRecord] = []

    def emit(step, metric, value):
        records.append(RunRecord(task.kind, name, seed, step, metric, float(value)))

    for k, v in evaluate(model, eval_batch).items():
        emit(0, k, v)
    aborted = False
    running, seen = 0.0, 0
    for step in range(1, steps + 1):
        if pool is not None:
            if order.size < batch_size:
                order = np.concatenate([order, data_rng.generator.permutation(len(pool))])
            batch, order = pool.subset(order[:batch_size]), order[batch_size:]
        else:
            batch = sample_batch(task, data_rng, batch_size)
        opt.zero_grad()
        loss = batch_loss(model, batch, drop_rng)
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            emit(step, "nan_abort", value)
            log.error("non-finite loss at step %d of %s/%s", step, task.kind, name)
            aborted = True
            break
        ad.backward(loss)
        opt.step()
        running += value
        seen += 1
        if step % eval_every == 0 or step == steps:
            emit(step, "train_loss", running / seen)
            running, seen = 0.0, 0
            for k, v in evaluate(model, eval_batch).items():
                emit(step, k, v)
    if out_dir is not None:
        save_run(Path(out_dir), task, spec, model)
    return TrainResult(records, model, aborted)


def task_fields() -> list[str]:
    return [f.name for f in fields(TaskSpec)]
