"""Experiment configuration (YAML).

Top-level keys: ``output_dir``, ``model``, ``train``, ``pretrain``, ``tasks``,
``sweep``, ``mtl``.  See the README for every key.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from ..model import ConfigError, ModelConfig
from ..tasks import TaskConfigError, TaskSpec
from ..tickets import MAX_LEVEL, POLICIES
from ..trainer import TrainConfig


@dataclass
class SweepConfig:
    levels: list[int] = field(default_factory=lambda: list(range(MAX_LEVEL + 1)))
    policies: list[str] = field(default_factory=lambda: list(POLICIES))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    importance_mode: str = "per_example"
    selection_fraction: float = 0.1
    timing: bool = False


@dataclass
class PretrainConfig:
    """Supervised warm start on every task's separate pretrain stream."""

    n_per_task: int = 4096
    n_holdout: int = 256
    epochs: int = 6
    lr: float = 2e-3
    batch_size: int = 32
    dropout: float = 0.1
    structure_dropout: float = 0.0
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch_size=self.batch_size, max_epochs=self.epochs, patience=self.epochs,
            dropout=self.dropout, structure_dropout=self.structure_dropout, seed=self.seed,
        )


@dataclass
class MTLConfig:
    tasks: list[str] = field(default_factory=list)
    seeds: list[int] | None = None
    train: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    output_dir: Path
    model: ModelConfig
    train: TrainConfig
    tasks: list[TaskSpec]
    task_train: dict[str, dict]
    sweep: SweepConfig
    mtl: MTLConfig
    pretrain: PretrainConfig | None = None
    task_sweep: dict[str, dict] = field(default_factory=dict)

    def task(self, name: str) -> TaskSpec:
        for t in self.tasks:
            if t.name == name:
                return t
        raise ConfigError(f"unknown task {name!r}")

    def train_config(self, task: str, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed, **self.task_train.get(task, {}))

    def levels(self, task: str) -> list[int]:
        return list(self.task_sweep.get(task, {}).get("levels", self.sweep.levels))

    def policies(self, task: str) -> list[str]:
        return list(self.task_sweep.get(task, {}).get("policies", self.sweep.policies))

    def mtl_train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed, **self.mtl.train)

    def finetune_config(self, task: str, seed: int) -> TrainConfig:
        return replace(self.train_config(task, seed), **self.mtl.finetune)

    @property
    def mtl_seeds(self) -> list[int]:
        return self.mtl.seeds if self.mtl.seeds is not None else self.sweep.seeds


def _check_keys(section: str, got: dict, allowed) -> None:
    extra = set(got) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}")


def _check_sweep(levels, policies) -> None:
    if any(not 0 <= k <= MAX_LEVEL for k in levels):
        raise ConfigError(f"sweep levels must lie in 0..{MAX_LEVEL}")
    if any(p not in POLICIES for p in policies):
        raise ConfigError(f"sweep policies must be among {POLICIES}")


def from_dict(doc: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    _check_keys("config", doc, ("output_dir", "model", "train", "pretrain", "tasks", "sweep", "mtl"))
    try:
        raw_tasks = doc.get("tasks") or []
        if not raw_tasks:
            raise ConfigError("config needs at least one task")
        tasks, task_train, task_sweep = [], {}, {}
        for t in raw_tasks:
            t = dict(t)
            override = t.pop("train", None)
            sweep_override = t.pop("sweep", None)
            spec = TaskSpec(**t)
            tasks.append(spec)
            if override:
                _check_keys(f"tasks[{spec.name}].train", override, TrainConfig.__dataclass_fields__)
                task_train[spec.name] = dict(override)
            if sweep_override:
                _check_keys(f"tasks[{spec.name}].sweep", sweep_override, ("levels", "policies"))
                _check_sweep(sweep_override.get("levels", []), sweep_override.get("policies", []))
                task_sweep[spec.name] = dict(sweep_override)
        if len({t.name for t in tasks}) != len(tasks):
            raise ConfigError("task names must be unique")
        model_doc = dict(doc.get("model") or {})
        _check_keys("model", model_doc, ModelConfig.__dataclass_fields__)
        model_doc.setdefault("vocab", max(t.vocab for t in tasks))
        model_doc.setdefault("max_len", max(t.length for t in tasks))
        model_doc["heads"] = {t.name: t.n_outputs for t in tasks}
        model = ModelConfig(**model_doc)
        if model.vocab < max(t.vocab for t in tasks) or model.max_len < max(t.length for t in tasks):
            raise ConfigError("model vocab/max_len too small for the tasks")
        train_doc = dict(doc.get("train") or {})
        _check_keys("train", train_doc, TrainConfig.__dataclass_fields__)
        train = TrainConfig(**train_doc)
        sweep_doc = dict(doc.get("sweep") or {})
        _check_keys("sweep", sweep_doc, SweepConfig.__dataclass_fields__)
        sweep = SweepConfig(**sweep_doc)
        if not sweep.seeds:
            raise ConfigError("sweep.seeds must be nonempty")
        _check_sweep(sweep.levels, sweep.policies)
        if sweep.importance_mode not in ("per_example", "per_batch"):
            raise ConfigError("sweep.importance_mode must be per_example or per_batch")
        mtl_doc = dict(doc.get("mtl") or {})
        _check_keys("mtl", mtl_doc, MTLConfig.__dataclass_fields__)
        mtl = MTLConfig(**mtl_doc)
        for name in mtl.tasks:
            if name not in {t.name for t in tasks}:
                raise ConfigError(f"mtl task {name!r} is not defined under tasks")
        for section in (mtl.train, mtl.finetune):
            _check_keys("mtl.train/finetune", section, TrainConfig.__dataclass_fields__)
        pretrain = None
        if doc.get("pretrain") is not None:
            pre_doc = dict(doc["pretrain"])
            _check_keys("pretrain", pre_doc, PretrainConfig.__dataclass_fields__)
            pretrain = PretrainConfig(**pre_doc)
            if pretrain.n_per_task < 1 or pretrain.n_holdout < 1 or pretrain.epochs < 1:
                raise ConfigError("pretrain sizes and epochs must be >= 1")
            pretrain.train_config()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    out = Path(doc.get("output_dir", "runs"))
    if base_dir is not None and not out.is_absolute():
        out = base_dir / out
    return ExperimentConfig(out, model, train, tasks, task_train, sweep, mtl, pretrain, task_sweep)


def load(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(doc, path.parent)


__all__ = ["ExperimentConfig", "SweepConfig", "MTLConfig", "PretrainConfig", "ConfigError", "TaskConfigError", "from_dict", "load"]
