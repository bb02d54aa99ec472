"""Summaries, seed-sensitivity tables and SVG curves from the pipeline CSVs.

Nothing here trains or scores; it only reads CSVs.
"""

from __future__ import annotations

import statistics
from collections import defaultdict
from pathlib import Path

import numpy as np

from .pipeline import read_rows, write_rows

POLICY_COLORS = {"winning": "#1f77b4", "random": "#ff7f0e", "losing": "#2ca02c"}


class StatsError(ValueError):
    pass


def sample_std(values) -> float:
    """n-1 standard deviation; exact for identical values (statistics uses rational arithmetic)."""
    values = [float(v) for v in values]
    if len(values) < 2:
        raise StatsError("sample standard deviation needs at least 2 values")
    return statistics.stdev(values)


def seed_sensitivity(rows: list[dict], keys: list[str], metric: str = "val_metric") -> list[dict]:
    """Sample std (n-1) of ``metric`` over seeds within each group of ``keys``."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in keys)].append(float(r[metric]))
    out = []
    for g in sorted(groups):
        vals = groups[g]
        if len(vals) < 2:
            raise StatsError(f"group {dict(zip(keys, g))} has a single seed")
        out.append({**dict(zip(keys, g)), "n": len(vals), "std": sample_std(vals)})
    return out


def summarize_sweep(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        groups[(r["task"], r["policy"], int(r["k"]))].append(r)
    out = []
    for (task, policy, k), rs in sorted(groups.items()):
        val = np.array([float(r["val_metric"]) for r in rs])
        test = np.array([float(r["test_metric"]) for r in rs])
        n = len(rs)
        out.append({
            "task": task, "policy": policy, "k": k, "n": n,
            "remaining_fraction": float(np.mean([float(r["remaining_fraction"]) for r in rs])),
            "val_mean": float(val.mean()), "val_std": sample_std(val) if n > 1 else 0.0,
            "test_mean": float(test.mean()), "test_std": sample_std(test) if n > 1 else 0.0,
        })
    return out


SUMMARY_COLUMNS = ["task", "policy", "k", "n", "remaining_fraction", "val_mean", "val_std", "test_mean", "test_std"]


def _f(x: float) -> str:
    return f"{x:.3f}"


def svg_curves(task: str, summary: list[dict], width: int = 480, height: int = 320) -> str:
    """x = remaining fraction, y = mean test metric, band = +/- 1 std."""
    rows = [r for r in summary if r["task"] == task]
    pad_l, pad_r, pad_t, pad_b = 56, 16, 28, 44
    xs = [r["remaining_fraction"] for r in rows]
    lo = min(r["test_mean"] - r["test_std"] for r in rows)
    hi = max(r["test_mean"] + r["test_std"] for r in rows)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = min(xs), max(xs)
    if x1 - x0 < 1e-9:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x1 - x) / (x1 - x0) * pw  # compression grows to the right

    def sy(y):
        return pad_t + (hi - y) / (hi - lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{task}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
        f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-size="11">percent of weight remaining</text>',
        f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" font-size="11" transform="rotate(-90 14 {pad_t + ph / 2:.1f})">test metric</text>',
    ]
    for frac in sorted(set(round(x, 3) for x in xs)):
        out.append(f'<text x="{_f(sx(frac))}" y="{pad_t + ph + 14}" text-anchor="middle" font-size="9">{100 * frac:.0f}</text>')
    for y in np.linspace(lo, hi, 5):
        out.append(f'<text x="{pad_l - 4}" y="{_f(sy(y) + 3)}" text-anchor="end" font-size="9">{y:.3f}</text>')
    for policy, color in POLICY_COLORS.items():
        pr = sorted((r for r in rows if r["policy"] == policy), key=lambda r: -r["remaining_fraction"])
        if not pr:
            continue
        upper = [(sx(r["remaining_fraction"]), sy(r["test_mean"] + r["test_std"])) for r in pr]
        lower = [(sx(r["remaining_fraction"]), sy(r["test_mean"] - r["test_std"])) for r in pr]
        band = " ".join(f"{_f(x)},{_f(y)}" for x, y in upper + lower[::-1])
        line = " ".join(f"{_f(sx(r['remaining_fraction']))},{_f(sy(r['test_mean']))}" for r in pr)
        out.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5" data-policy="{policy}"/>')
    for i, (policy, color) in enumerate(POLICY_COLORS.items()):
        y = pad_t + 10 + 14 * i
        out.append(f'<line x1="{pad_l + pw - 70}" y1="{y}" x2="{pad_l + pw - 56}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw - 52}" y="{y + 3}" font-size="10">{policy}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(output_dir: Path) -> list[Path]:
    """Emit summary.csv, seed_sensitivity.csv and one SVG per task from sweep.csv
    (plus MTL tables when mtl.csv / finetune.csv exist)."""
    output_dir = Path(output_dir)
    rep = output_dir / "report"
    rep.mkdir(parents=True, exist_ok=True)
    written = []
    sweep_path = output_dir / "sweep.csv"
    if sweep_path.exists():
        rows = read_rows(sweep_path)
        summary = summarize_sweep(rows)
        write_rows(rep / "summary.csv", SUMMARY_COLUMNS, summary)
        written.append(rep / "summary.csv")
        seeds = {r["seed"] for r in rows}
        if len(seeds) > 1:
            write_rows(rep / "seed_sensitivity.csv", ["task", "policy", "k", "n", "std"],
                       seed_sensitivity(rows, ["task", "policy", "k"]))
            written.append(rep / "seed_sensitivity.csv")
        for task in sorted({r["task"] for r in rows}):
            p = rep / f"{task}.svg"
            p.write_text(svg_curves(task, summary))
            written.append(p)
    for name, keys in (("mtl", ["method", "task"]), ("finetune", ["method", "task"])):
        path = output_dir / f"{name}.csv"
        if not path.exists():
            continue
        rows = read_rows(path)
        groups = defaultdict(list)
        for r in rows:
            groups[(r["method"], r["task"])].append(float(r["val_metric"]))
        summ = [
            {"method": m, "task": t, "n": len(v), "val_mean": float(np.mean(v)),
             "val_median": float(np.median(v)), "val_std": sample_std(v) if len(v) > 1 else 0.0}
            for (m, t), v in sorted(groups.items())
        ]
        write_rows(rep / f"{name}_summary.csv", ["method", "task", "n", "val_mean", "val_median", "val_std"], summ)
        written.append(rep / f"{name}_summary.csv")
    return written
