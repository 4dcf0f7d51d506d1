"""Figures for the analysis reports.

All figures go through the Agg backend and are saved as PNG with the
software tag stripped, so identical data gives identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
}
EXPERT_COLORS = {"H": "#1f77b4", "S": "#2ca02c", "V": "#d62728", "full": "#7f7f7f"}


def _figure(width=4.5, height=3.0):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_recall_curves(curves: Mapping[str, Sequence[tuple[float, float]]], path) -> Path:
    fig, ax = _figure()
    for name, curve in curves.items():
        t, r = zip(*curve)
        ax.plot(t, r, marker="o", markersize=3, label=name)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("recall")
    ax.set_ylim(0, 1.02)
    ax.legend()
    return _save(fig, path)


def plot_iou_histograms(hists: Mapping[str, np.ndarray], edges: Sequence[float], path) -> Path:
    fig, ax = _figure()
    edges = np.asarray(edges)
    width = np.diff(edges)
    n = max(len(hists), 1)
    for k, (name, counts) in enumerate(hists.items()):
        ax.bar(edges[:-1] + width * k / n, counts, width=width / n, align="edge", label=name)
    ax.set_yscale("log")
    ax.set_xlabel("max IoU with ground truth")
    ax.set_ylabel("RoI count")
    ax.legend()
    return _save(fig, path)


def plot_per_expert(table: Mapping[str, Mapping[str, float]], classes: Sequence[str], path) -> Path:
    fig, ax = _figure(5.0, 3.0)
    x = np.arange(len(classes))
    n = max(len(table), 1)
    for k, (expert, row) in enumerate(table.items()):
        vals = [row.get(c, np.nan) for c in classes]
        ax.bar(x + (k - (n - 1) / 2) * 0.8 / n, vals, width=0.8 / n, label=expert, color=EXPERT_COLORS.get(expert))
    ax.set_xticks(x)
    ax.set_xticklabels(classes)
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.05)
    ax.legend(title="expert")
    return _save(fig, path)


def plot_loss(history: Sequence[Mapping[str, float]], path, window: int = 25) -> Path:
    from .training import smoothed

    fig, ax = _figure()
    it = np.array([h["iteration"] for h in history])
    total = np.array([h["total"] for h in history])
    ax.plot(it, total, color="0.8", linewidth=0.6, label="total")
    s = smoothed(total, window)
    if len(s):
        ax.plot(it[len(it) - len(s) :], s, color="k", linewidth=1.0, label=f"mean of {window}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)
