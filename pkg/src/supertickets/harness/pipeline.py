"""Pipeline stages behind the CLI.  Every stage reads and writes under
``cfg.output_dir``; layout::

    pretrained/encoder.stkt, history.csv  supervised warm start (only with a ``pretrain`` section)
    pretrained/seed{s}.stkt               the weights every fine-tune and rewind starts from
    {task}/seed{s}/finetuned.stkt         full-model fine-tune, history.csv
    {task}/seed{s}/scores.csv             importance scores of the fine-tuned model
    {task}/seed{s}/masks/{policy}_k{k}.json
    {task}/seed{s}/rewound/{policy}_k{k}.stkt
    sweep.csv, selection.csv, super_tickets.json
    mtl/seed{s}/{plain,share}.stkt, registry.json; mtl.csv, finetune.csv
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .. import checkpoint
from ..model import ConfigError, MaskSet, ModelParams, init_head, init_params, remaining_fraction
from ..mtl import MTLTask, TaskMaskRegistry, build_registry, downstream_finetune, mtl_train
from ..tasks import Dataset, TaskSpec, generate, generate_split, selection_split
from ..tickets import (
    ImportanceScores,
    compute_importance,
    normalize,
    read_scores_csv,
    rewind,
    select_super,
    select_tickets,
    write_scores_csv,
)
from ..trainer import TaskStream, evaluate, fit, train_streams
from .config import ExperimentConfig

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["task", "policy", "k", "seed", "remaining_fraction", "val_metric", "test_metric", "seconds"]
MTL_COLUMNS = ["seed", "method", "task", "val_metric", "test_metric"]
SELECTION_COLUMNS = ["task", "seed", "k", "selection_metric"]
FINETUNE_COLUMNS = ["seed", "method", "task", "val_before", "val_metric", "test_metric"]


def fmt(x: float) -> str:
    return f"{x:.8f}"


@lru_cache(maxsize=32)
def _data(spec: TaskSpec) -> dict[str, Dataset]:
    return generate(spec)


def task_data(spec: TaskSpec) -> dict[str, Dataset]:
    return _data(spec)


def write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- paths


def pretrained_path(cfg: ExperimentConfig, seed: int) -> Path:
    return cfg.output_dir / "pretrained" / f"seed{seed}.stkt"


def seed_dir(cfg: ExperimentConfig, task: str, seed: int) -> Path:
    return cfg.output_dir / task / f"seed{seed}"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path}; run `{hint}` first")
    return path


# ---------------------------------------------------------------- stages


def encoder_path(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "pretrained" / "encoder.stkt"


def pretrain_stage(cfg: ExperimentConfig) -> ModelParams | None:
    """Multi-task warm start on each task's pretrain stream (cached on disk).

    The last ``n_holdout`` samples of every stream pick the best epoch, so
    the validation splits never influence the starting weights.
    """
    if cfg.pretrain is None:
        return None
    path = encoder_path(cfg)
    if path.exists():
        return checkpoint.load(path)[0]
    pc = cfg.pretrain
    streams = []
    for spec in cfg.tasks:
        data = generate_split(spec, "pretrain", pc.n_per_task + pc.n_holdout)
        idx = np.arange(len(data))
        streams.append(TaskStream(
            spec.name, data.take(idx[: pc.n_per_task]), data.take(idx[pc.n_per_task :]),
            spec.loss_kind, MaskSet.ones(cfg.model),
        ))
    res = train_streams(init_params(cfg.model, pc.seed), streams, pc.train_config())
    if res.history.diverged:
        raise RuntimeError(f"pretraining diverged: {res.history.diverged}")
    checkpoint.save(path, res.params, extra={"holdout": res.task_metrics, "best_epoch": res.history.best_epoch})
    res.history.write_csv(path.parent / "history.csv")
    return checkpoint.load(path)[0]


def ensure_pretrained(cfg: ExperimentConfig, seed: int) -> ModelParams:
    """Per-seed starting weights: the shared pretrained encoder with this
    seed's fresh task heads, or a plain seeded initialization when no
    ``pretrain`` section is configured."""
    path = pretrained_path(cfg, seed)
    if not path.exists():
        encoder = pretrain_stage(cfg)
        if encoder is None:
            params = init_params(cfg.model, seed)
        else:
            params = encoder.copy()
            for task in cfg.model.heads:
                params.tensors.update(init_head(cfg.model, task, seed))
        checkpoint.save(path, params, extra={"seed": seed, "pretrained": encoder is not None})
    return checkpoint.load(path)[0]


def load_pretrained(cfg: ExperimentConfig, seed: int) -> ModelParams:
    return checkpoint.load(_require(pretrained_path(cfg, seed), "train"))[0]


def train_stage(cfg: ExperimentConfig, task: str, seed: int) -> Path:
    """Save the pretrained (initial) checkpoint and fine-tune the full model."""
    spec = cfg.task(task)
    data = task_data(spec)
    p0 = ensure_pretrained(cfg, seed)
    mask = MaskSet.ones(cfg.model)
    res = fit(p0, data["train"], data["val"], mask, cfg.train_config(task, seed), task, spec.loss_kind)
    out = seed_dir(cfg, task, seed)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out / "finetuned.stkt", res.params, mask, {"best_epoch": res.history.best_epoch})
    res.history.write_csv(out / "history.csv")
    if res.history.diverged:
        log.warning("%s seed %d diverged: %s", task, seed, res.history.diverged)
    return out / "finetuned.stkt"


def score_stage(cfg: ExperimentConfig, task: str, seed: int) -> tuple[ImportanceScores, ImportanceScores]:
    spec = cfg.task(task)
    out = seed_dir(cfg, task, seed)
    params, _, _ = checkpoint.load(_require(out / "finetuned.stkt", "train"))
    raw = compute_importance(
        params, MaskSet.ones(cfg.model), task_data(spec)["train"], task, spec.loss_kind, cfg.sweep.importance_mode
    )
    normed = normalize(raw)
    write_scores_csv(out / "scores.csv", raw, normed)
    return read_scores_csv(out / "scores.csv")


def load_scores(cfg: ExperimentConfig, task: str, seed: int) -> tuple[ImportanceScores, ImportanceScores]:
    path = seed_dir(cfg, task, seed) / "scores.csv"
    if not path.exists():
        return score_stage(cfg, task, seed)
    return read_scores_csv(path)


def mask_path(cfg: ExperimentConfig, task: str, seed: int, policy: str, k: int) -> Path:
    return seed_dir(cfg, task, seed) / "masks" / f"{policy}_k{k}.json"


def prune_stage(cfg: ExperimentConfig, task: str, seed: int, policy: str, k: int) -> MaskSet:
    _, normed = load_scores(cfg, task, seed)
    mask = select_tickets(normed, k, policy, seed)
    path = mask_path(cfg, task, seed, policy, k)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(mask.to_dict()) + "\n")
    return mask


@dataclass
class CellResult:
    params: ModelParams
    mask: MaskSet
    val_metric: float
    test_metric: float
    selection_metric: float


def rewind_cell(cfg: ExperimentConfig, task: str, seed: int, mask: MaskSet) -> CellResult:
    """Rewind to the pretrained weights under ``mask`` and fine-tune again."""
    spec = cfg.task(task)
    data = task_data(spec)
    p0 = load_pretrained(cfg, seed)
    start, mask = rewind(p0, mask, p0)
    res = fit(start, data["train"], data["val"], mask, cfg.train_config(task, seed), task, spec.loss_kind)
    sel = selection_split(data["val"], spec.seed, cfg.sweep.selection_fraction)
    return CellResult(
        res.params, mask, res.history.best_metric,
        evaluate(res.params, data["test"], mask, task),
        evaluate(res.params, sel, mask, task),
    )


def rewind_stage(cfg: ExperimentConfig, task: str, seed: int, policy: str, k: int) -> Path:
    path = mask_path(cfg, task, seed, policy, k)
    mask = MaskSet.from_dict(json.loads(path.read_text())) if path.exists() else prune_stage(cfg, task, seed, policy, k)
    cell = rewind_cell(cfg, task, seed, mask)
    out = seed_dir(cfg, task, seed) / "rewound" / f"{policy}_k{k}.stkt"
    checkpoint.save(out, cell.params, mask, {"val_metric": cell.val_metric, "test_metric": cell.test_metric})
    return out


def baseline_cell(cfg: ExperimentConfig, task: str, seed: int) -> CellResult:
    """The k=0 cell.  Rewinding with the all-ones mask reproduces the
    full-model fine-tune bit for bit, so the stored checkpoint is reused."""
    spec = cfg.task(task)
    data = task_data(spec)
    params, mask, _ = checkpoint.load(_require(seed_dir(cfg, task, seed) / "finetuned.stkt", "train"))
    sel = selection_split(data["val"], spec.seed, cfg.sweep.selection_fraction)
    return CellResult(
        params, mask, evaluate(params, data["val"], mask, task),
        evaluate(params, data["test"], mask, task), evaluate(params, sel, mask, task),
    )


def run_sweep(cfg: ExperimentConfig, tasks: list[str] | None = None) -> list[dict]:
    """One row per (task, policy, level, seed); writes sweep.csv, selection.csv
    and super_tickets.json (when the winning policy is swept).

    Restricting ``tasks`` replaces only those tasks' rows and keeps the rest.
    """
    kept_rows, kept_selection, supers = [], [], {}
    if tasks:
        kept_rows, kept_selection, supers = _other_tasks(cfg, set(tasks))
    tasks = tasks or [t.name for t in cfg.tasks]
    for task in tasks:
        for seed in cfg.sweep.seeds:
            _require(pretrained_path(cfg, seed), "train")
            _require(seed_dir(cfg, task, seed) / "finetuned.stkt", "train")
    rows, selection = [], []
    for task in tasks:
        supers.pop(task, None)
        for seed in cfg.sweep.seeds:
            _, normed = load_scores(cfg, task, seed)
            base = None
            for policy in cfg.policies(task):
                for k in cfg.levels(task):
                    t0 = time.perf_counter()
                    if k == 0:
                        base = base or baseline_cell(cfg, task, seed)
                        cell = base
                    else:
                        cell = rewind_cell(cfg, task, seed, select_tickets(normed, k, policy, seed))
                    seconds = time.perf_counter() - t0 if cfg.sweep.timing else 0.0
                    rows.append({
                        "task": task, "policy": policy, "k": k, "seed": seed,
                        "remaining_fraction": remaining_fraction(cell.mask, cfg.model),
                        "val_metric": cell.val_metric, "test_metric": cell.test_metric, "seconds": seconds,
                    })
                    if policy == "winning":
                        selection.append({"task": task, "seed": seed, "k": k, "selection_metric": cell.selection_metric, "mask": cell.mask})
                    log.info("%s seed=%d %s k=%d val=%.4f", task, seed, policy, k, cell.val_metric)
            picks = [(r["k"], r["selection_metric"]) for r in selection if r["task"] == task and r["seed"] == seed]
            if picks:
                k_star = select_super(picks)
                mask = next(r["mask"] for r in selection if r["task"] == task and r["seed"] == seed and r["k"] == k_star)
                supers.setdefault(task, {})[str(seed)] = {"k": k_star, "mask": mask.to_dict()}
    rows.sort(key=lambda r: (r["task"], r["policy"], r["k"], r["seed"]))
    merged = sorted(kept_rows + rows, key=lambda r: (r["task"], r["policy"], r["k"], r["seed"]))
    write_rows(cfg.output_dir / "sweep.csv", SWEEP_COLUMNS, merged)
    selection += kept_selection
    if selection:
        write_rows(
            cfg.output_dir / "selection.csv", SELECTION_COLUMNS,
            sorted(selection, key=lambda r: (r["task"], r["seed"], r["k"])),
        )
        (cfg.output_dir / "super_tickets.json").write_text(json.dumps(supers, indent=2, sort_keys=True) + "\n")
    return rows


def _other_tasks(cfg: ExperimentConfig, tasks: set[str]) -> tuple[list[dict], list[dict], dict]:
    """Rows and super tickets already on disk for tasks outside ``tasks``.

    Numeric keys are parsed back so merged rows sort the same way fresh ones do;
    metric strings are kept verbatim.
    """
    out = cfg.output_dir

    def load(name):
        if not (out / name).exists():
            return []
        rows = [r for r in read_rows(out / name) if r["task"] not in tasks]
        for r in rows:
            r["k"], r["seed"] = int(r["k"]), int(r["seed"])
        return rows

    supers = {}
    if (out / "super_tickets.json").exists():
        supers = {t: v for t, v in json.loads((out / "super_tickets.json").read_text()).items() if t not in tasks}
    return load("sweep.csv"), load("selection.csv"), supers


def super_masks(cfg: ExperimentConfig, seed: int, tasks: list[str]) -> dict[str, MaskSet]:
    path = _require(cfg.output_dir / "super_tickets.json", "sweep")
    doc = json.loads(path.read_text())
    out = {}
    for t in tasks:
        try:
            out[t] = MaskSet.from_dict(doc[t][str(seed)]["mask"])
        except KeyError as exc:
            raise ConfigError(f"no super ticket for task {t} seed {seed}; sweep it with the winning policy") from exc
    return out


def _mtl_tasks(cfg: ExperimentConfig) -> list[MTLTask]:
    names = cfg.mtl.tasks or [t.name for t in cfg.tasks]
    out = []
    for n in names:
        spec = cfg.task(n)
        d = task_data(spec)
        out.append(MTLTask(n, d["train"], d["val"], spec.loss_kind))
    return out


def mtl_stage(cfg: ExperimentConfig) -> list[dict]:
    """Plain multi-task training (all-ones masks) and tickets sharing, per seed."""
    tasks = _mtl_tasks(cfg)
    names = [t.name for t in tasks]
    rows = []
    for seed in cfg.mtl_seeds:
        p0 = ensure_pretrained(cfg, seed)
        registries = {
            "plain": build_registry({n: MaskSet.ones(cfg.model) for n in names}),
            "share": build_registry(super_masks(cfg, seed, names)),
        }
        out = cfg.output_dir / "mtl" / f"seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        for method, reg in registries.items():
            res = mtl_train(p0, reg, tasks, cfg.mtl_train_config(seed))
            checkpoint.save(out / f"{method}.stkt", res.params, reg.union)
            reg.save(out / f"{method}_registry.json")
            res.history.write_csv(out / f"{method}_history.csv")
            for t in tasks:
                test = task_data(cfg.task(t.name))["test"]
                rows.append({
                    "seed": seed, "method": method, "task": t.name,
                    "val_metric": res.task_metrics[t.name],
                    "test_metric": evaluate(res.params, test, reg.masks[t.name], t.name),
                })
    rows.sort(key=lambda r: (r["method"], r["task"], r["seed"]))
    write_rows(cfg.output_dir / "mtl.csv", MTL_COLUMNS, rows)
    return rows


def finetune_stage(cfg: ExperimentConfig) -> list[dict]:
    tasks = _mtl_tasks(cfg)
    rows = []
    for seed in cfg.mtl_seeds:
        out = cfg.output_dir / "mtl" / f"seed{seed}"
        for method in ("plain", "share"):
            params, _, _ = checkpoint.load(_require(out / f"{method}.stkt", "mtl"))
            reg = TaskMaskRegistry.load(out / f"{method}_registry.json")
            for t in tasks:
                mask = reg.masks[t.name]
                before = evaluate(params, t.val, mask, t.name)
                res = downstream_finetune(params, t, mask, cfg.finetune_config(t.name, seed))
                test = task_data(cfg.task(t.name))["test"]
                rows.append({
                    "seed": seed, "method": method, "task": t.name, "val_before": before,
                    "val_metric": res.history.best_metric,
                    "test_metric": evaluate(res.params, test, mask, t.name),
                })
    rows.sort(key=lambda r: (r["method"], r["task"], r["seed"]))
    write_rows(cfg.output_dir / "finetune.csv", FINETUNE_COLUMNS, rows)
    return rows
