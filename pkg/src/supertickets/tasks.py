"""Synthetic sequence tasks with controllable size and label noise.

Generators:

* ``trigger_bigram`` -- label 1 iff a designated bigram occurs.
* ``marked_parity`` -- parity of the number of tokens from a marked subset.
* ``majority`` -- whether group A tokens outnumber group B tokens.
* ``count_ratio`` -- regression target: fraction of marked tokens.

The designated bigram / token groups depend only on ``seed``; each split is
drawn from its own stream so splits are independent samples.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

GENERATORS = ("trigger_bigram", "marked_parity", "majority", "count_ratio")
SPLITS = ("train", "val", "test")


class TaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    generator: str = "trigger_bigram"
    vocab: int = 32
    length: int = 16
    n_train: int = 512
    n_val: int = 512
    n_test: int = 1024
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.generator not in GENERATORS:
            raise TaskConfigError(f"unknown generator {self.generator!r}")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise TaskConfigError("split sizes must be >= 1")
        if not 0.0 <= self.noise < 0.5:
            raise TaskConfigError("noise must be in [0, 0.5)")
        if self.vocab < 8 or self.length < 2:
            raise TaskConfigError("need vocab >= 8 and length >= 2")

    @property
    def kind(self) -> str:
        return "regression" if self.generator == "count_ratio" else "classification"

    @property
    def n_outputs(self) -> int:
        return 1 if self.kind == "regression" else 2

    @property
    def loss_kind(self) -> str:
        return "mse" if self.kind == "regression" else "cross_entropy"

    def to_dict(self) -> dict:
        return asdict(self)


class Dataset:
    def __init__(self, tokens: np.ndarray, targets: np.ndarray, kind: str) -> None:
        if len(tokens) != len(targets):
            raise ValueError("tokens and targets differ in length")
        self.tokens = np.asarray(tokens, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.float64 if kind == "regression" else np.int64)
        self.kind = kind

    def __len__(self) -> int:
        return len(self.tokens)

    def take(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.targets[idx], self.kind)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.tokens, other.tokens]),
            np.concatenate([self.targets, other.targets]),
            self.kind,
        )

    def save(self, path) -> None:
        lines = []
        for row, t in zip(self.tokens, self.targets):
            target = repr(float(t)) if self.kind == "regression" else str(int(t))
            lines.append(" ".join(map(str, row)) + "\t" + target)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, kind: str) -> "Dataset":
        toks, targets = [], []
        for line in Path(path).read_text().splitlines():
            if not line:
                continue
            left, right = line.split("\t")
            toks.append([int(x) for x in left.split()])
            targets.append(float(right) if kind == "regression" else int(right))
        return cls(np.array(toks), np.array(targets), kind)


def designated_tokens(spec: TaskSpec) -> dict[str, np.ndarray]:
    """The task's fixed structure: trigger bigram, marked set, groups A/B."""
    rng = np.random.default_rng([spec.seed, 7])
    perm = rng.permutation(spec.vocab)
    q = spec.vocab // 4
    return {
        "bigram": perm[:2].copy(),
        "marked": np.sort(perm[:q]),
        "group_a": np.sort(perm[:q]),
        "group_b": np.sort(perm[q : 2 * q]),
    }


def contains_bigram(tokens: np.ndarray, bigram) -> np.ndarray:
    u, v = bigram
    return ((tokens[:, :-1] == u) & (tokens[:, 1:] == v)).any(axis=1)


def _sample(spec: TaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    V, l = spec.vocab, spec.length
    des = designated_tokens(spec)
    if spec.generator == "trigger_bigram":
        toks = rng.integers(0, V, (n, l))
        plant = rng.random(n) < 0.5
        pos = rng.integers(0, l - 1, n)
        rows = np.nonzero(plant)[0]
        toks[rows, pos[rows]] = des["bigram"][0]
        toks[rows, pos[rows] + 1] = des["bigram"][1]
        return toks, contains_bigram(toks, des["bigram"]).astype(np.int64)
    if spec.generator == "marked_parity":
        toks = rng.integers(0, V, (n, l))
        return toks, (np.isin(toks, des["marked"]).sum(axis=1) % 2).astype(np.int64)
    if spec.generator == "majority":
        out_t, out_y = [], []
        need = n
        while need > 0:
            toks = rng.integers(0, V, (2 * need + 8, l))
            a = np.isin(toks, des["group_a"]).sum(axis=1)
            b = np.isin(toks, des["group_b"]).sum(axis=1)
            keep = a != b  # rejection keeps the A<->B symmetry, hence balance
            out_t.append(toks[keep][:need])
            out_y.append((a > b)[keep][:need].astype(np.int64))
            need -= len(out_t[-1])
        return np.concatenate(out_t), np.concatenate(out_y)
    # count_ratio
    marked = des["marked"]
    unmarked = np.setdiff1d(np.arange(V), marked)
    p = rng.random((n, 1))
    is_marked = rng.random((n, l)) < p
    toks = np.where(
        is_marked,
        marked[rng.integers(0, len(marked), (n, l))],
        unmarked[rng.integers(0, len(unmarked), (n, l))],
    )
    return toks, is_marked.mean(axis=1)


def generate_split(spec: TaskSpec, split: str, n: int | None = None) -> Dataset:
    """One split; ``"pretrain"`` draws from a fourth stream disjoint from train/val/test."""
    if split == "pretrain":
        idx = len(SPLITS)
        if n is None:
            raise TaskConfigError("the pretrain split needs an explicit size")
    else:
        idx = SPLITS.index(split)
        n = getattr(spec, f"n_{split}") if n is None else n
    rng = np.random.default_rng([spec.seed, 100 + idx])
    toks, y = _sample(spec, n, rng)
    if spec.noise > 0:
        if spec.kind == "classification":
            flip = rng.random(n) < spec.noise
            y = np.where(flip, 1 - y, y)
        else:
            y = y + spec.noise * rng.standard_normal(n)
    return Dataset(toks, y, spec.kind)


def generate(spec: TaskSpec) -> dict[str, Dataset]:
    return {s: generate_split(spec, s) for s in SPLITS}


def subsample(data: Dataset, fraction: float, seed: int) -> Dataset:
    if not 0.0 < fraction <= 1.0:
        raise TaskConfigError(f"fraction must be in (0, 1], got {fraction}")
    n = int(round(fraction * len(data)))
    if n < 1:
        raise TaskConfigError("subsample would be empty")
    if n == len(data):
        return data
    idx = np.sort(np.random.default_rng([seed, 11]).choice(len(data), n, replace=False))
    return data.take(idx)


def selection_split(val: Dataset, seed: int, fraction: float = 0.1) -> Dataset:
    """The fixed slice of the validation split reserved for super-ticket selection."""
    n = max(1, int(round(fraction * len(val))))
    idx = np.sort(np.random.default_rng([seed, 13]).permutation(len(val))[:n])
    return val.take(idx)
