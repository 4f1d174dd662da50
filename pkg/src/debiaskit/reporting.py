"""Run comparison tables and static figures.

Values come byte-for-byte from the stored metrics; nothing is recomputed
here. Missing metrics render as absent cells, never failures.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

ACCURACY_KEYS = ("overall_acc", "aligned_acc", "conflict_acc")


@dataclass
class RunSummary:
    name: str
    metrics: dict[str, object] = field(default_factory=dict)
    energy_kwh: Optional[float] = None
    duration_hours: Optional[float] = None
    carbon_grams: Optional[float] = None


def comparison_rows(runs: list[RunSummary]) -> list[dict]:
    """One row per run; a delta column against the first run when there are
    at least two runs with comparable accuracies."""
    if not runs:
        raise ValueError("need at least one run to compare")
    rows = []
    base = runs[0]
    for run in runs:
        row: dict[str, object] = {"name": run.name}
        for key in ACCURACY_KEYS:
            row[key] = run.metrics.get(key)
        row["energy_kwh"] = run.energy_kwh
        row["duration_hours"] = run.duration_hours
        row["carbon_grams"] = run.carbon_grams
        if len(runs) > 1 and run is not base:
            a, b = run.metrics.get("overall_acc"), base.metrics.get("overall_acc")
            row["overall_acc_delta_vs_" + base.name] = (
                a - b if isinstance(a, (int, float)) and isinstance(b, (int, float)) else None
            )
        rows.append(row)
    return rows


def _fmt(value: object) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_table(rows: list[dict]) -> str:
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    widths = {c: max(len(c), max(len(_fmt(r.get(c))) for r in rows)) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    lines.append("  ".join("-" * widths[c] for c in columns))
    for row in rows:
        lines.append("  ".join(_fmt(row.get(c)).ljust(widths[c]) for c in columns))
    return "\n".join(lines) + "\n"


def write_comparison(runs: list[RunSummary], out_dir: Path | str) -> dict[str, Path]:
    """Emit comparison.json, comparison.txt and the two bar figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = comparison_rows(runs)
    json_path = out_dir / "comparison.json"
    json_path.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    txt_path = out_dir / "comparison.txt"
    txt_path.write_text(render_table(rows), encoding="utf-8")

    acc_path = out_dir / "accuracy_bars.png"
    _accuracy_figure(runs, acc_path)
    energy_path = out_dir / "energy_time_bars.png"
    _energy_figure(runs, energy_path)
    return {
        "comparison_json": json_path,
        "comparison_txt": txt_path,
        "accuracy_figure": acc_path,
        "energy_figure": energy_path,
    }


def _accuracy_figure(runs: list[RunSummary], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    names = [r.name for r in runs]
    x = range(len(runs))
    width = 0.25
    for i, key in enumerate(ACCURACY_KEYS):
        values = [r.metrics.get(key) for r in runs]
        heights = [v if isinstance(v, (int, float)) else 0.0 for v in values]
        ax.bar([xi + (i - 1) * width for xi in x], heights, width, label=key)
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _energy_figure(runs: list[RunSummary], path: Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    names = [r.name for r in runs]
    grams = [r.carbon_grams if r.carbon_grams is not None else 0.0 for r in runs]
    hours = [r.duration_hours if r.duration_hours is not None else 0.0 for r in runs]
    axes[0].bar(names, grams)
    axes[0].set_ylabel("g CO2eq")
    axes[1].bar(names, hours)
    axes[1].set_ylabel("hours")
    for ax in axes:
        ax.tick_params(axis="x", rotation=15)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
