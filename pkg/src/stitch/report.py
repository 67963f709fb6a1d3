"""Figure rendering for the evaluation and training report paths.

Every eval command writes its delimited output next to one or more PNG
figures produced here. Rendering uses the Agg backend, so it works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AbChoice, AbSummary
from .model import CyclicLRSchedule, lr_at


def save_pr_curves(
    curves: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path
) -> Path:
    """Per-class precision-recall curves on a single axes."""
    fig, ax = plt.subplots(figsize=(6, 5))
    for label, (recall, precision) in sorted(curves.items()):
        ax.plot(recall, precision, marker=".", markersize=3, linewidth=1, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    if len(curves) <= 20:
        ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_ap_bars(per_class: dict[str, float], mean: float, path: str | Path) -> Path:
    labels = sorted(per_class)
    values = [per_class[c] for c in labels]
    fig, ax = plt.subplots(figsize=(6, max(2.5, 0.3 * len(labels) + 1)))
    ax.barh(labels, values, color="tab:blue")
    ax.axvline(mean, color="tab:red", linestyle="--", label=f"overall {mean:.2f}")
    ax.set_xlabel("average precision")
    ax.set_xlim(0, 1.0)
    ax.invert_yaxis()
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_loss_curve(history: list[float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(history) + 1), history, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_lr_curve(schedule: CyclicLRSchedule, total_iters: int, path: str | Path) -> Path:
    ts = np.arange(total_iters)
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(ts, [lr_at(schedule, int(t)) for t in ts])
    ax.set_xlabel("iteration")
    ax.set_ylabel("learning rate")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_ab_bars(summary: AbSummary, path: str | Path) -> Path:
    labels = {
        AbChoice.A_BETTER: "A better",
        AbChoice.B_BETTER: "B better",
        AbChoice.BOTH_BAD: "both bad",
        AbChoice.BOTH_GOOD: "both good",
    }
    names = [labels[c] for c in AbChoice]
    values = [summary.percentages[c] for c in AbChoice]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, values, color=["tab:blue", "tab:orange", "tab:gray", "tab:green"])
    ax.set_ylabel("% of decided queries")
    ax.set_ylim(0, 100)
    ax.set_title(f"{summary.decided_total} decided, {summary.undecided} undecided")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_consistency_bars(values: dict[str, float], path: str | Path) -> Path:
    names = list(values)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(names, [values[n] for n in names], color="tab:purple")
    ax.set_ylabel("attribute consistency")
    ax.set_ylim(0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
