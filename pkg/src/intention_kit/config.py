"""Strict JSON experiment configs.

Every section maps onto a dataclass; unknown keys anywhere are an error so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Union

from .blocks import BlockSpec, OptimSpec, ScheduleSpec
from .kvq import AlphaSpec, KernelSpec, ModuleSpec
from .linalg import ContractError
from .tasks.experiments import ScalingSpec
from .tasks.train import TaskSpec


class ConfigError(ContractError):
    pass


@dataclass
class BenchSpec:
    N_values: list = field(default_factory=lambda: [64, 128, 256, 512])
    d_values: list = field(default_factory=lambda: [64, 128, 256, 512])
    reps: int = 15
    warmup: int = 2
    slope_N: list = field(default_factory=lambda: [128, 256, 512, 1024])
    slope_d: int = 1024
    variance_trials: int = 200


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModuleSpec = field(default_factory=ModuleSpec)
    block: BlockSpec = field(default_factory=BlockSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    scaling: ScalingSpec = field(default_factory=ScalingSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    steps: int = 1000
    batch_size: int = 8
    eval_every: int = 100
    eval_sets: int = 256

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.eval_sets < 1:
            raise ConfigError("steps >= 0, batch_size, eval_every and eval_sets >= 1 required")

    def model_spec(self) -> Union[ModuleSpec, BlockSpec]:
        """The block for the anomaly task, the KVQ module spec otherwise."""
        return self.block if self.task.kind == "anomaly" else self.model

    def to_dict(self) -> dict:
        return asdict(self)


# nested dataclass fields, by owner
_NESTED = {
    ExperimentConfig: {"task": TaskSpec, "model": ModuleSpec, "block": BlockSpec, "optim": OptimSpec,
                       "scaling": ScalingSpec, "bench": BenchSpec},
    ModuleSpec: {"alpha": AlphaSpec, "kernel": KernelSpec},
    OptimSpec: {"schedule": ScheduleSpec},
}


def _build(cls, obj: Any, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object, got {type(obj).__name__}")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(names)}")
    kwargs = {}
    for key, value in obj.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub is not None else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def resolve(obj: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, obj, "config")


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    """Read and resolve a JSON config; ``None`` gives all defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return resolve(obj)


def dump_config(cfg: ExperimentConfig, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
