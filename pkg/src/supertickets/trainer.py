"""Adamax training with linear warmup/decay, global-norm clipping and early stopping."""

from __future__ import annotations

import csv
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .model import MaskSet, ModelParams, loss_and_grads, predict, update_masks
from .tasks import Dataset


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-3
    batch_size: int = 32
    max_epochs: int = 20
    warmup: float = 0.1
    clip: float = 1.0
    patience: int = 3
    seed: int = 0
    dropout: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    structure_dropout: float = 0.0  # per-step drop rate for live heads and FFN blocks

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError("warmup must be in [0, 1)")
        if self.clip <= 0:
            raise ValueError("clip must be > 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0, patience >= 0 required")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.structure_dropout < 1.0:
            raise ValueError("structure_dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr over ``warmup * total`` steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    peak = cfg.warmup * total_steps
    if step < peak:
        return cfg.lr * step / peak
    return cfg.lr * (total_steps - step) / (total_steps - peak)


@dataclass
class OptState:
    m: dict[str, np.ndarray]
    u: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptState":
        return cls(
            {k: np.zeros_like(v) for k, v in params.tensors.items()},
            {k: np.zeros_like(v) for k, v in params.tensors.items()},
        )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], clip: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise DivergenceError("non-finite gradient norm")
    if norm <= clip:
        return grads, norm
    s = clip / norm
    return {k: (g * s).astype(g.dtype) for k, g in grads.items()}, norm


def step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptState,
    lr: float,
    cfg: TrainConfig,
    live: dict[str, np.ndarray] | None = None,
) -> ModelParams:
    """One Adamax update in place.

    ``live`` holds 0/1 arrays broadcastable to each parameter; entries at 0
    keep their value and moment state untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    lr_t = lr / (1.0 - b1**t)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name} at step {t}")
        p = params.tensors[name]
        dt = p.dtype.type
        m = dt(b1) * state.m[name] + dt(1.0 - b1) * g
        u = np.maximum(dt(b2) * state.u[name], np.abs(g))
        upd = dt(lr_t) * m / (u + dt(cfg.eps))
        mask = None if live is None else live.get(name)
        if mask is None or (mask.ndim == 0 and mask == 1):
            state.m[name], state.u[name] = m, u
            p -= upd
        elif mask.ndim == 0:
            continue
        else:
            keep = mask.astype(bool)
            state.m[name] = np.where(keep, m, state.m[name])
            state.u[name] = np.where(keep, u, state.u[name])
            p -= np.where(keep, upd, dt(0))
    return params


# ---------------------------------------------------------------- evaluation


def evaluate(params: ModelParams, data: Dataset, mask: MaskSet | None, task: str) -> float:
    """Accuracy for classification, negative MSE for regression."""
    out = predict(params, data.tokens, mask, task).astype(np.float64)
    if data.kind == "regression":
        return -float(np.mean((out[:, 0] - data.targets) ** 2))
    return float(np.mean(out.argmax(axis=1) == data.targets))


# ---------------------------------------------------------------- training loop


@dataclass
class TaskStream:
    """One task's data and mask inside a training run."""

    task: str
    train: Dataset
    val: Dataset
    loss_kind: str
    mask: MaskSet

    @property
    def stream_id(self) -> int:
        return zlib.crc32(self.task.encode())


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_metric: float = float("-inf")
    diverged: str | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_metric", "lr"])
            for r in self.rows:
                w.writerow([r["epoch"], f"{r['train_loss']:.8g}", f"{r['val_metric']:.8g}", f"{r['lr']:.8g}"])


@dataclass
class FitResult:
    params: ModelParams
    history: History
    task_metrics: dict[str, float]


def _epoch_batches(streams: list[TaskStream], cfg: TrainConfig, epoch: int) -> list[tuple[int, np.ndarray]]:
    batches = []
    for i, s in enumerate(streams):
        perm = np.random.default_rng([cfg.seed, 17, s.stream_id, epoch]).permutation(len(s.train))
        for j in range(0, len(perm), cfg.batch_size):
            batches.append((i, perm[j : j + cfg.batch_size]))
    order = np.random.default_rng([cfg.seed, 19, epoch]).permutation(len(batches))
    return [batches[k] for k in order]


def _dropped(mask: MaskSet, rate: float, rng: np.random.Generator) -> MaskSet:
    """Randomly switch off live structures for one step (no rescaling)."""
    xi = mask.xi * (rng.random(mask.xi.shape) >= rate)
    nu = mask.nu * (rng.random(mask.nu.shape) >= rate)
    return MaskSet(xi, nu)


def _val_metrics(params: ModelParams, streams: list[TaskStream]) -> dict[str, float]:
    return {s.task: evaluate(params, s.val, s.mask, s.task) for s in streams}


def train_streams(
    params: ModelParams,
    streams: list[TaskStream],
    cfg: TrainConfig,
    *,
    eval_initial: bool = False,
    on_step=None,
) -> FitResult:
    """Interleaved minibatch training; early stopping on the mean validation metric.

    Each minibatch of task ``i`` updates only the parameters live under that
    task's mask plus its own head.  One optimizer state is shared by all
    tasks.  ``on_step(step_index, task, params)`` is called after each update.
    """
    params = params.copy()
    state = OptState.zeros(params)
    live = [update_masks(params, s.mask, s.task) for s in streams]
    names = [params.encoder_names() + params.head_names(s.task) for s in streams]
    per_epoch = sum(-(-len(s.train) // cfg.batch_size) for s in streams)
    total = per_epoch * cfg.max_epochs
    hist = History()
    best = params.copy()
    best_metrics: dict[str, float] = {}
    if eval_initial or cfg.max_epochs == 0:
        best_metrics = _val_metrics(params, streams)
        hist.best_metric = float(np.mean(list(best_metrics.values())))
        hist.best_epoch = 0
    n_step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        lr = 0.0
        try:
            for ti, idx in _epoch_batches(streams, cfg, epoch):
                s = streams[ti]
                lr = lr_at(n_step + 1, total, cfg)
                mask = s.mask
                if cfg.structure_dropout > 0:
                    mask = _dropped(mask, cfg.structure_dropout, np.random.default_rng([cfg.seed, 31, n_step]))
                out = loss_and_grads(
                    params, s.train.tokens[idx], s.train.targets[idx], mask, s.task, s.loss_kind,
                    names=names[ti], dropout=cfg.dropout,
                    rng=np.random.default_rng([cfg.seed, 23, n_step]) if cfg.dropout > 0 else None,
                )
                if not np.isfinite(out.loss):
                    raise DivergenceError(f"loss is {out.loss}")
                grads, _ = clip_grads(out.grads, cfg.clip)
                step(params, grads, state, lr, cfg, live[ti])
                n_step += 1
                losses.append(out.loss)
                if on_step is not None:
                    on_step(n_step, s.task, params)
        except (DivergenceError, NonFiniteError) as exc:
            task = streams[ti].task
            hist.diverged = f"epoch {epoch}, task {task}: {exc}"
            break
        metrics = _val_metrics(params, streams)
        val = float(np.mean(list(metrics.values())))
        hist.rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_metric": val, "lr": lr, "tasks": metrics})
        if val > hist.best_metric:
            hist.best_metric, hist.best_epoch = val, epoch
            best = params.copy()
            best_metrics = metrics
        elif epoch - hist.best_epoch > cfg.patience:
            break
    if hist.best_epoch < 0:
        try:
            best_metrics = _val_metrics(best, streams)
        except NonFiniteError:
            best_metrics = {s.task: float("-inf") for s in streams}
        hist.best_metric = float(np.mean(list(best_metrics.values())))
    return FitResult(best, hist, best_metrics)


def fit(
    params: ModelParams,
    train: Dataset,
    val: Dataset,
    mask: MaskSet,
    cfg: TrainConfig,
    task: str,
    loss_kind: str,
    *,
    eval_initial: bool = False,
) -> FitResult:
    """Single-task fine-tuning; returns the best-validation parameters."""
    return train_streams(params, [TaskStream(task, train, val, loss_kind, mask)], cfg, eval_initial=eval_initial)
