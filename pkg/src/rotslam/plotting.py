"""File-only figures for run and evaluation reports (matplotlib, Agg)."""
from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_trajectories(path, estimate: np.ndarray, reference: np.ndarray | None = None,
                      title: str = "trajectory"):
    """Top view (x, y) of an estimate and an optional aligned reference."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 6))
    if reference is not None:
        ax.plot(reference[:, 0], reference[:, 1], "k--", lw=1, label="reference")
    ax.plot(estimate[:, 0], estimate[:, 1], "C0-", lw=1.5, label="estimate")
    ax.plot(estimate[:1, 0], estimate[:1, 1], "C0o")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(title)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_window_times(path, rot_times, trans_times):
    """Stacked per-window solve times."""
    plt = _pyplot()
    k = np.arange(len(rot_times))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(k, rot_times, label="rotation averaging")
    ax.bar(k, trans_times, bottom=rot_times, label="translation averaging")
    ax.set_xlabel("window")
    ax.set_ylabel("seconds")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
