"""Tickets sharing across tasks and the cross-task importance breakdown."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import MaskSet, ModelParams, remaining_fraction
from .tickets import ImportanceScores
from .trainer import FitResult, TaskStream, TrainConfig, train_streams


class RegistryError(ValueError):
    pass


@dataclass
class TaskMaskRegistry:
    masks: dict[str, MaskSet]

    @property
    def tasks(self) -> list[str]:
        return list(self.masks)

    @property
    def union(self) -> MaskSet:
        masks = list(self.masks.values())
        out = masks[0]
        for m in masks[1:]:
            out = out.union(m)
        return out

    def head_owners(self, layer: int, head: int) -> frozenset[str]:
        return frozenset(t for t, m in self.masks.items() if m.xi[layer, head])

    def ffn_owners(self, layer: int) -> frozenset[str]:
        return frozenset(t for t, m in self.masks.items() if m.nu[layer])

    def union_fraction(self, cfg) -> float:
        return remaining_fraction(self.union, cfg)

    def save(self, path) -> None:
        any_mask = next(iter(self.masks.values()))
        doc = {
            "layers": any_mask.n_layers,
            "heads": any_mask.n_heads,
            "tasks": [
                {
                    "task": t,
                    "xi": "".join(str(int(b)) for b in m.xi.reshape(-1)),
                    "nu": "".join(str(int(b)) for b in m.nu),
                }
                for t, m in self.masks.items()
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "TaskMaskRegistry":
        doc = json.loads(Path(path).read_text())
        L, H = doc["layers"], doc["heads"]
        masks = {
            e["task"]: MaskSet(np.array([int(c) for c in e["xi"]]).reshape(L, H), [int(c) for c in e["nu"]])
            for e in doc["tasks"]
        }
        return cls(masks)


def build_registry(super_masks: dict[str, MaskSet]) -> TaskMaskRegistry:
    if not super_masks:
        raise RegistryError("need at least one task mask")
    shapes = {m.xi.shape for m in super_masks.values()}
    if len(shapes) != 1:
        raise RegistryError(f"task masks differ in shape: {sorted(shapes)}")
    return TaskMaskRegistry(dict(super_masks))


@dataclass
class MTLTask:
    name: str
    train: object
    val: object
    loss_kind: str


def mtl_train(params: ModelParams, registry: TaskMaskRegistry, tasks: list[MTLTask], cfg: TrainConfig, on_step=None) -> FitResult:
    """Algorithm: shuffle all tasks' minibatches each epoch; a task-i batch
    trains under mask i and updates only what that mask keeps plus head i.

    Structures outside the union of masks are never touched.
    """
    missing = [t.name for t in tasks if t.name not in registry.masks]
    if missing:
        raise RegistryError(f"no mask for tasks {missing}")
    streams = [TaskStream(t.name, t.train, t.val, t.loss_kind, registry.masks[t.name]) for t in tasks]
    return train_streams(params, streams, cfg, on_step=on_step)


def downstream_finetune(params: ModelParams, task: MTLTask, mask: MaskSet, cfg: TrainConfig) -> FitResult:
    """Continue training one task's live parameters and its (reused) head.

    The starting point counts as a candidate for the best-validation
    checkpoint, so the returned model never scores below it on validation.
    """
    return train_streams(params, [TaskStream(task.name, task.train, task.val, task.loss_kind, mask)], cfg, eval_initial=True)


@dataclass
class ShareRow:
    layer: int
    structure: str
    ticket_importance: float
    shares: list[float]


def task_share_report(scores: dict[str, ImportanceScores]) -> list[ShareRow]:
    """Mean importance over tasks, and each task's fraction of the total."""
    names = list(scores)
    head = np.stack([scores[t].head for t in names])  # N, L, H
    ffn = np.stack([scores[t].ffn for t in names])  # N, L
    rows = []
    _, L, H = head.shape

    def row(layer, label, vals):
        total = vals.sum()
        shares = (vals / total).tolist() if total > 0 else [0.0] * len(vals)
        return ShareRow(layer, label, float(vals.mean()), shares)

    for layer in range(L):
        for h in range(H):
            rows.append(row(layer, f"head{h}", head[:, layer, h]))
        rows.append(row(layer, "ffn", ffn[:, layer]))
    return rows


def write_share_csv(path, rows: list[ShareRow]) -> None:
    n = len(rows[0].shares) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "structure", "ticket_importance"] + [f"task_share_{i + 1}" for i in range(n)])
        for r in rows:
            w.writerow([r.layer, r.structure, f"{r.ticket_importance:.10g}"] + [f"{s:.10g}" for s in r.shares])
