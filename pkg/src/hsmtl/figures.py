"""Report figures rendered next to the delimited evaluation output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import AggregateReport


def render_oa_figure(cells: dict[tuple[int, str], AggregateReport], task_id: str,
                     path: str) -> None:
    """Accuracy-vs-samples-per-class curve with std error bars, one line per
    method, saved as a PNG alongside the CSV table."""
    methods = sorted({method for _, method in cells})
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for method in methods:
        ns = sorted(n for n, m in cells if m == method)
        means = [100.0 * cells[(n, method)].mean_oa for n in ns]
        stds = [100.0 * (cells[(n, method)].std_oa or 0.0) for n in ns]
        ax.errorbar(ns, means, yerr=stds, marker="o", capsize=3, label=method)
    ax.set_xlabel("training samples per class")
    ax.set_ylabel("overall accuracy (%)")
    ax.set_title(task_id)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
