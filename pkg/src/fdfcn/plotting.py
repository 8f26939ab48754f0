"""Figures written next to the tab-separated reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 150,
}


def figure(width: float = 6.0, height: float | None = None):
    """Figure and axes with the top/right border removed."""
    plt.rcParams.update(STYLE)
    fig = plt.figure(figsize=(width, height or width * GOLDEN), facecolor="w")
    ax = fig.add_subplot(1, 1, 1)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.xaxis.set_ticks_position("bottom")
    ax.yaxis.set_ticks_position("left")
    return fig, ax


def save(fig, path) -> None:
    # no timestamp/software metadata so reruns produce identical bytes
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_metrics(rows, path, title: str = "") -> None:
    """Grouped Dice/IoU bars, one group per structure plus the mean."""
    names = [r.name for r in rows]
    x = np.arange(len(rows))
    fig, ax = figure(max(6.0, 0.5 * len(rows)))
    ax.bar(x - 0.2, [r.dice for r in rows], 0.4, label="Dice", color="#3b6ea5")
    ax.bar(x + 0.2, [r.iou for r in rows], 0.4, label="IoU", color="#e08e45")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("overlap")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, loc="lower right")
    save(fig, path)


def plot_history(history, path) -> None:
    """Training loss and validation mean Dice per epoch."""
    epochs = [h.epoch for h in history]
    fig, ax = figure()
    ax.plot(epochs, [h.loss for h in history], "o-", color="#3b6ea5", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    right = ax.twinx()
    right.spines["top"].set_visible(False)
    right.plot(epochs, [h.mean_dice for h in history], "s--", color="#e08e45", label="val Dice")
    right.set_ylim(0.0, 1.0)
    right.set_ylabel("mean Dice")
    handles = ax.get_legend_handles_labels()[0] + right.get_legend_handles_labels()[0]
    ax.legend(handles, [h.get_label() for h in handles], frameon=False, loc="center right")
    save(fig, path)
