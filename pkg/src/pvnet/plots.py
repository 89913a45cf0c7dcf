"""Report figures written to PNG with the non-interactive Agg backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | os.PathLike) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def pr_figure(curves: dict[str, tuple[np.ndarray, np.ndarray]], path: str | os.PathLike) -> None:
    """Interpolated precision-recall curves, one line per label."""
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for label, (recall, precision) in curves.items():
        ax.plot(recall, precision, marker="o", ms=3, label=label)
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02), title="Retrieval precision-recall")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    _save(fig, path)


def sweep_figure(rows: list[dict], path: str | os.PathLike) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    axis = rows[0]["axis"] if rows else "points"
    for name in dict.fromkeys(r["model"] for r in rows):
        pts = sorted((r["level"], r["overall"]) for r in rows if r["model"] == name)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set(xlabel=f"test {axis}", ylabel="overall accuracy", ylim=(0, 1.02))
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def ablation_figure(rows: list[dict], path: str | os.PathLike) -> None:
    """Bars at the per-arm median of overall accuracy, individual seeds as dots."""
    arms = list(dict.fromkeys(r["arm"] for r in rows))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, arm in enumerate(arms):
        vals = [r["overall"] for r in rows if r["arm"] == arm]
        ax.bar(i, np.median(vals), color="tab:blue", alpha=0.6)
        ax.scatter([i] * len(vals), vals, color="k", s=12, zorder=3)
    ax.set_xticks(range(len(arms)), arms)
    ax.set(ylabel="overall accuracy", ylim=(0, 1.02))
    _save(fig, path)
