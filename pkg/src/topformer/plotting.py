"""Figures written next to the text reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analyzer import CostReport, breakdown  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_breakdown(report: CostReport, path) -> None:
    """Grouped bars of parameter and FLOP share per module."""
    shares = breakdown(report)
    mods = list(shares)
    p = np.array([shares[m][0] for m in mods])
    f = np.array([shares[m][1] for m in mods])
    x = np.arange(len(mods))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        b1 = ax.bar(x - 0.2, p, 0.4, label="params", color="#4c72b0")
        b2 = ax.bar(x + 0.2, f, 0.4, label="FLOPs", color="#dd8452")
        ax.bar_label(b1, fmt="%.0f%%", fontsize=7)
        ax.bar_label(b2, fmt="%.0f%%", fontsize=7)
        ax.set_xticks(x, mods)
        ax.set_ylabel("share of total (%)")
        ax.set_ylim(0, max(p.max(), f.max()) * 1.15)
        hw = f"{report.input_hw[0]}x{report.input_hw[1]}" if report.input_hw else ""
        ax.set_title(f"{report.variant} {hw}: {report.total_params / 1e6:.2f}M params, "
                     f"{report.total_flops / 1e9:.2f} GFLOPs")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_latency(results, path) -> None:
    """Box plot of per-iteration latency for one or more BenchResults."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        ax.boxplot([r.samples_ms for r in results])
        ax.set_xticks(range(1, len(results) + 1), [r.variant for r in results])
        ax.set_ylabel("latency (ms)")
        ax.set_title(f"single forward, {results[0].threads} thread(s)")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
