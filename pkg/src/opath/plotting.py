"""Figures written next to the CSV/JSON outputs when ``--plot`` is given.

matplotlib is imported lazily so the library and the plain CLI work without it.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_growth(summary: list[dict], path: Path) -> Path:
    """Growth-rate estimate and survival fraction against p."""
    plt = _pyplot()
    ps = [row["p"] for row in summary]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    est = [row["estimate"]["mean"] if row["estimate"] else math.nan for row in summary]
    ci = [row["estimate"]["ci95"] if row["estimate"] else 0.0 for row in summary]
    ax1.errorbar(ps, est, yerr=ci, fmt="o-", capsize=3, label="(1/N) log Z_N")
    grid = np.linspace(min(ps), max(ps), 100)
    ax1.plot(grid, np.log(grid), "--", color="gray", label="log p")
    ax1.set_xlabel("p")
    ax1.set_ylabel("growth rate")
    ax1.legend(fontsize=8)
    ax2.plot(ps, [row["survival_fraction"] for row in summary], "s-")
    ax2.set_xlabel("p")
    ax2.set_ylabel("survival fraction at N")
    ax2.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_criterion(log_zbar: np.ndarray, threshold: float, mean: float, ci95: float,
                   path: Path) -> Path:
    """Histogram of log Zbar with the mean, its interval and N0 log p."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.hist(log_zbar, bins=60, color="#6a8fbf")
    ax.axvline(threshold, color="black", ls="--", label="N0 log p")
    ax.axvspan(mean - ci95, mean + ci95, color="orange", alpha=0.4, label="mean, 95% CI")
    ax.axvline(mean, color="orange")
    ax.set_xlabel("log Zbar_N0")
    ax.set_ylabel("replicas")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bounds(bounds: dict, path: Path) -> Path | None:
    """Bar chart of (value - 1) for every bound that was computed."""
    rows = [(name, b["value"] - 1) for name, b in bounds.items()
            if isinstance(b, dict) and "value" in b and b["value"] > 1]
    if not rows:
        return None
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.barh([r[0] for r in rows], [r[1] for r in rows], color="#7fa37f")
    ax.set_xscale("log")
    ax.set_xlabel("value - 1")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
