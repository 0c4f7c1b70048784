"""Figure rendering for evaluation reports.

Everything draws through the Agg backend and writes atomically (tmp file in
the target directory, then rename), so a crash mid-render never leaves a
truncated png next to valid results.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ConfigError, require


def atomic_savefig(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp.png")
    try:
        with os.fdopen(fd, "wb") as fh:
            fig.savefig(fh, format="png", dpi=110, bbox_inches="tight")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)
    return path


def plot_loss_curves(curves: dict[str, list[float]], path: str | os.PathLike,
                     title: str = "Adaptive attack loss change") -> Path:
    """One series per defense: mean loss change against attack iteration."""
    require(len(curves) > 0, ConfigError, "no curves to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in sorted(curves.items()):
        ax.plot(range(len(ys)), ys, marker="o", markersize=3, label=label)
    ax.set_xlabel("attack iteration")
    ax.set_ylabel("mean loss change")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return atomic_savefig(fig, path)


def plot_sweep(labels: list[str], series: dict[str, list[float]],
               path: str | os.PathLike, xlabel: str,
               ylabel: str = "accuracy") -> Path:
    """Metric curves over a swept knob; x positions are the row labels."""
    require(len(labels) > 0 and len(series) > 0, ConfigError, "empty sweep")
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(labels))
    for name, ys in sorted(series.items()):
        ax.plot(xs, ys, marker="s", markersize=4, label=name)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(l) for l in labels], rotation=30, ha="right")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return atomic_savefig(fig, path)


def plot_accuracy_grid(columns: list[str], rows: dict[str, list[float]],
                       path: str | os.PathLike) -> Path:
    """Grouped bars: one group per defense, one bar per metric column."""
    require(len(rows) > 0, ConfigError, "empty grid")
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 4))
    names = list(rows)
    width = 0.8 / max(len(columns), 1)
    for j, col in enumerate(columns):
        xs = [i + j * width for i in range(len(names))]
        ax.bar(xs, [rows[n][j] for n in names], width=width, label=col)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(names))])
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    return atomic_savefig(fig, path)


def emit_plots(report: dict | str | os.PathLike, out_dir: str | os.PathLike) -> list[Path]:
    """Render every figure a report supports into out_dir/plots.

    Accepts the report dict or a path to its results JSON.  Returns the list
    of files written.  Never touches the JSON it reads.
    """
    if not isinstance(report, dict):
        with open(report, "r", encoding="utf-8") as fh:
            report = json.load(fh)
    out = Path(out_dir) / "plots"
    kind = report.get("kind")
    written: list[Path] = []
    if kind == "matrix":
        columns = ["clean"] + list(report.get("columns", []))
        grid = {}
        for label, row in report.get("rows", {}).items():
            acc = {**row.get("robust_acc_star", {}), **row.get("robust_acc", {})}
            grid[label] = [row.get("standard_acc")] + [acc.get(c) for c in report.get("columns", [])]
        grid = {k: [v if v is not None else 0.0 for v in vs] for k, vs in grid.items()}
        if grid:
            written.append(plot_accuracy_grid(columns, grid, out / "matrix_acc.png"))
        curves = {label: row["loss_curves"][key]
                  for label, row in report.get("rows", {}).items()
                  for key in list(row.get("loss_curves", {}))[:1]}
        if curves:
            written.append(plot_loss_curves(curves, out / "adaptive_loss.png"))
    elif kind == "ablation":
        rows = report.get("rows", [])
        labels = [r["label"] for r in rows]
        metrics = [m for m in ("standard_acc", "robust_acc_star", "robust_acc")
                   if any(r.get(m) is not None for r in rows)]
        series = {m: [r.get(m) if r.get(m) is not None else 0.0 for r in rows]
                  for m in metrics}
        if series:
            written.append(plot_sweep(labels, series,
                                      out / f"ablation_{report.get('knob', 'sweep')}.png",
                                      xlabel=report.get("knob", "value")))
    else:
        raise ConfigError(f"report kind {kind!r} has no plot recipe")
    return written
