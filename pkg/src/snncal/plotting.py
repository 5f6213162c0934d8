"""Static figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLES = {"vanilla": ("tab:gray", "--"), "ftbc": ("tab:blue", "-"), "avgbias": ("tab:orange", "-.")}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def accuracy_vs_timesteps(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, accs in report.accuracy.items():
        color, ls = STYLES.get(method, (None, "-"))
        ax.plot(report.timesteps, np.asarray(accs) * 100, ls, color=color, marker="o", ms=3, label=method)
    ax.axhline(report.ann_accuracy * 100, color="k", lw=0.8, ls=":", label="ANN")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("timesteps T")
    ax.set_ylabel("test accuracy (%)")
    ax.legend(frameon=False)
    return _save(fig, path)


def stability(iterations, acc_matrix, path, timesteps=(1, 2, 4, 8, 16, 32)) -> Path:
    """Per-T accuracy against calibration iteration."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for t in timesteps:
        if t <= acc_matrix.shape[1]:
            ax.plot(iterations, acc_matrix[:, t - 1] * 100, label=f"T={t}")
    ax.set_xlabel("calibration iteration")
    ax.set_ylabel("accuracy (%)")
    ax.legend(frameon=False, ncol=2, fontsize=8)
    return _save(fig, path)


def membrane_histogram(counts, edges, path, title="") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="tab:blue", alpha=0.8)
    ax.set_xlabel("membrane potential before firing")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title, fontsize=9)
    return _save(fig, path)


def bias_sweep(rows, path) -> Path:
    """Found bias against target, one line per distribution, closed form dashed."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for dist in sorted({r["distribution"] for r in rows}):
        rs = [r for r in rows if r["distribution"] == dist]
        line = ax.plot([r["target"] for r in rs], [r["b"] for r in rs], "o-", ms=3, label=dist)[0]
        ax.plot([r["target"] for r in rs], [r["b_closed_form"] for r in rs], ":", color=line.get_color())
    ax.set_xlabel("target firing probability")
    ax.set_ylabel("bias b")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)
