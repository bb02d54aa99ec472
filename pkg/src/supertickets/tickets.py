"""Structure importance, one-shot ticket selection, rewinding and super tickets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import InputError
from .checkpoint import CheckpointError
from .model import MaskSet, ModelParams, loss_and_grads
from .tasks import Dataset

POLICIES = ("winning", "random", "losing")
MAX_LEVEL = 8


@dataclass
class ImportanceScores:
    head: np.ndarray  # (L, H)
    ffn: np.ndarray  # (L,)
    normalized: bool = False

    def copy(self) -> "ImportanceScores":
        return ImportanceScores(self.head.copy(), self.ffn.copy(), self.normalized)


def compute_importance(
    params: ModelParams,
    mask: MaskSet,
    data: Dataset,
    task: str,
    loss_kind: str,
    mode: str = "per_example",
    batch_size: int = 64,
) -> ImportanceScores:
    """Mean absolute loss gradient with respect to each mask variable.

    ``per_example`` takes |dL(x)/dxi| for every example before averaging;
    ``per_batch`` takes |dL_batch/dxi| per minibatch of mean loss.  Structures
    already pruned by ``mask`` score 0.  Dropout is off.
    """
    if len(data) == 0:
        raise InputError("importance needs a nonempty dataset")
    if mode not in ("per_example", "per_batch"):
        raise ValueError(f"unknown importance mode {mode!r}")
    L, H = mask.xi.shape
    head = np.zeros((L, H))
    ffn = np.zeros(L)
    n_batches = 0
    for i in range(0, len(data), batch_size):
        tok = data.tokens[i : i + batch_size]
        tgt = data.targets[i : i + batch_size]
        if mode == "per_example":
            out = loss_and_grads(params, tok, tgt, mask, task, loss_kind, names=[], mask_grads="per_example", reduction="sum")
            head += np.abs(out.xi_grad.astype(np.float64)).sum(axis=0)
            ffn += np.abs(out.nu_grad.astype(np.float64)).sum(axis=0)
        else:
            out = loss_and_grads(params, tok, tgt, mask, task, loss_kind, names=[], mask_grads="shared")
            head += np.abs(out.xi_grad.astype(np.float64))
            ffn += np.abs(out.nu_grad.astype(np.float64))
        n_batches += 1
    denom = len(data) if mode == "per_example" else n_batches
    return ImportanceScores(head / denom * mask.xi, ffn / denom * mask.nu)


def normalize(scores: ImportanceScores) -> ImportanceScores:
    """Divide each layer's head scores by their l2 norm; FFN scores unchanged."""
    if scores.normalized:
        raise ValueError("scores are already normalized")
    # scale by the row max first so tiny scores neither underflow nor lose precision
    peak = scores.head.max(axis=1, keepdims=True)
    scaled = np.divide(scores.head, peak, out=np.zeros_like(scores.head), where=peak > 0)
    norms = np.sqrt((scaled**2).sum(axis=1, keepdims=True))
    head = np.divide(scaled, norms, out=np.zeros_like(scaled), where=norms > 0)
    return ImportanceScores(head, scores.ffn.copy(), True)


def prune_count(level: int, total: int) -> int:
    """floor(level * 10% * total) in exact integer arithmetic."""
    return (level * total) // 10


def importance_order(values: np.ndarray) -> np.ndarray:
    """Flat indices sorted by (score, position) ascending; position is row-major (layer, head)."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    return np.lexsort((np.arange(flat.size), flat))


def _pruned(values: np.ndarray, n: int, policy: str, rng: np.random.Generator) -> np.ndarray:
    flat = np.ones(values.size, dtype=np.int8)
    if n == 0:
        return flat.reshape(values.shape)
    order = importance_order(values)
    if policy == "winning":
        drop = order[:n]
    elif policy == "losing":
        # exact reverse of the winning order, so the two are disjoint when 2n <= total
        drop = order[::-1][:n]
    else:
        drop = rng.choice(values.size, n, replace=False)
    flat[drop] = 0
    return flat.reshape(values.shape)


def select_tickets(scores: ImportanceScores, level: int, policy: str, seed: int = 0) -> MaskSet:
    """Prune ``level`` tenths of heads (global ranking) and of FFN blocks."""
    if not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"sparsity level must be in 0..{MAX_LEVEL}")
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy != "random" and not scores.normalized:
        raise ValueError("winning/losing selection expects normalized scores")
    rng = np.random.default_rng([seed, 29, level])
    xi = _pruned(scores.head, prune_count(level, scores.head.size), policy, rng)
    nu = _pruned(scores.ffn, prune_count(level, scores.ffn.size), policy, rng)
    return MaskSet(xi, nu)


def rewind(current: ModelParams, mask: MaskSet, pretrained: ModelParams) -> tuple[ModelParams, MaskSet]:
    """Reset all parameters (encoder and task heads) to the pretrained values."""
    for name, arr in current.tensors.items():
        if name not in pretrained.tensors:
            raise CheckpointError(f"pretrained checkpoint lacks {name}")
        if pretrained.tensors[name].shape != arr.shape:
            raise CheckpointError(f"{name}: shape {pretrained.tensors[name].shape} != {arr.shape}")
    if mask.xi.shape != (current.cfg.n_layers, current.cfg.n_heads):
        raise CheckpointError("mask does not match the model config")
    tensors = {k: pretrained.tensors[k].astype(v.dtype, copy=True) for k, v in current.tensors.items()}
    return ModelParams(current.cfg, tensors), mask


def select_super(sweep) -> int:
    """Level with the best rewound validation metric; ties go to the larger level."""
    sweep = list(sweep)
    if not sweep:
        raise InputError("empty sweep")
    best_k, best_v = None, float("-inf")
    for k, v in sorted(sweep):
        if v >= best_v:
            best_k, best_v = k, v
    return int(best_k)


# ---------------------------------------------------------------- persistence


def write_scores_csv(path, raw: ImportanceScores, normed: ImportanceScores | None = None) -> None:
    normed = normed if normed is not None else normalize(raw)
    L, H = raw.head.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "structure", "raw_score", "normalized_score"])
        for layer in range(L):
            for h in range(H):
                w.writerow([layer, f"head{h}", f"{raw.head[layer, h]:.10g}", f"{normed.head[layer, h]:.10g}"])
            w.writerow([layer, "ffn", f"{raw.ffn[layer]:.10g}", f"{normed.ffn[layer]:.10g}"])


def read_scores_csv(path) -> tuple[ImportanceScores, ImportanceScores]:
    rows = list(csv.DictReader(Path(path).open()))
    L = 1 + max(int(r["layer"]) for r in rows)
    H = sum(1 for r in rows if r["layer"] == "0" and r["structure"] != "ffn")
    raw = ImportanceScores(np.zeros((L, H)), np.zeros(L))
    normed = ImportanceScores(np.zeros((L, H)), np.zeros(L), True)
    for r in rows:
        layer = int(r["layer"])
        if r["structure"] == "ffn":
            raw.ffn[layer] = float(r["raw_score"])
            normed.ffn[layer] = float(r["normalized_score"])
        else:
            h = int(r["structure"][4:])
            raw.head[layer, h] = float(r["raw_score"])
            normed.head[layer, h] = float(r["normalized_score"])
    return raw, normed
