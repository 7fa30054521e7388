"""Box-plot figures for evaluation reports."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABELS = {
    "dsc": "DSC",
    "hd95_mm": "HD95 (mm)",
    "msd_mm": "MSD (mm)",
    "tumor_overlap": "Tumour overlap",
}


def _finite(values):
    return [v for v in values if v is not None and not math.isnan(v)]


def metric_boxplot(table, metric, path):
    """One box per (run, test set) for ``metric``; ``table`` is run -> {test set -> rows}.

    Returns False (and writes nothing) when no run has a value for the metric.
    """
    groups, names = [], []
    for run in sorted(table):
        for ts in sorted(table[run]):
            vals = _finite([getattr(r, metric) for r in table[run][ts]])
            if vals:
                groups.append(vals)
                names.append(f"{run}\n{ts}")
    if not groups:
        return False
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(groups) + 1.5), 3.6))
    ax.boxplot(groups, showmeans=True)
    ax.set_xticks(range(1, len(names) + 1))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel(LABELS.get(metric, metric))
    if metric in ("dsc", "tumor_overlap"):
        lo = min(min(g) for g in groups)
        ax.set_ylim(max(0.0, lo - 0.05), 1.01)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def report_figures(table, out_dir, metrics=("dsc", "hd95_mm", "msd_mm", "tumor_overlap")):
    """Write ``<metric>.png`` for every metric with data; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for m in metrics:
        path = os.path.join(out_dir, f"{m}.png")
        if metric_boxplot(table, m, path):
            written.append(path)
    return written
