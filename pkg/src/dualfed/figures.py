"""Render run metrics and comparison tables to PNG files.

Figures are written next to the delimited outputs they summarize. The PNG
writer strips the software metadata chunk so reruns are byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsRow  # noqa: E402

_FIGSIZE = (6.4, 4.0)
_DPI = 120


def _save(fig, path: str) -> None:
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    plt.close(fig)


def save_training_curves(rows: list[MetricsRow], path: str) -> None:
    """Mean test accuracy of the three prediction paths over rounds."""
    rounds = [r.round for r in rows]
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.plot(rounds, [r.mean_acc_global for r in rows], label="global path")
    ax.plot(rounds, [r.mean_acc_personal for r in rows], label="personal path")
    ax.plot(rounds, [r.mean_acc_ensemble for r in rows], label="ensemble")
    ax.set_xlabel("round")
    ax.set_ylabel("mean test accuracy")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def save_representation_curves(rows: list[MetricsRow], path: str) -> None:
    """Class separation and cross-client CKA of both representation stages."""
    rounds = [r.round for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.6, 4.0))
    ax1.plot(rounds, [float(np.mean(r.sep_z)) for r in rows],
             label="pre-projection z")
    ax1.plot(rounds, [float(np.mean(r.sep_u)) for r in rows],
             label="post-projection u")
    ax1.set_xlabel("round")
    ax1.set_ylabel("mean class separation")
    ax1.grid(True, alpha=0.3)
    ax1.legend()
    ax2.plot(rounds, [r.mean_cka_z for r in rows], label="pre-projection z")
    ax2.plot(rounds, [r.mean_cka_u for r in rows], label="post-projection u")
    ax2.set_xlabel("round")
    ax2.set_ylabel("mean cross-client CKA")
    ax2.grid(True, alpha=0.3)
    ax2.legend()
    fig.tight_layout()
    _save(fig, path)


def save_comparison_chart(labels: list[str], means: list[float],
                          stds: list[float], path: str) -> None:
    """Bar chart of headline accuracy per method with std error bars."""
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    x = range(len(labels))
    ax.bar(x, [100.0 * m for m in means], yerr=[100.0 * s for s in stds],
           capsize=4, color="tab:blue", alpha=0.85)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("best mean ensemble accuracy (%)")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)
