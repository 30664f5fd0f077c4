"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import roc_curve  # noqa: E402


def plot_loss_curves(rows, path: str | os.PathLike, title: str = "training loss") -> None:
    """Train/val loss per epoch on a log axis; phase changes marked."""
    epochs = [r.epoch for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r.train_loss for r in rows], label="train")
    ax.plot(epochs, [r.val_loss for r in rows], label="val")
    for prev, cur in zip(rows, rows[1:]):
        if cur.phase != prev.phase:
            ax.axvline(cur.epoch - 0.5, color="grey", lw=0.8, ls="--")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_prediction_panel(label, prob, binary, path: str | os.PathLike, title: str = "") -> None:
    """Truth, predicted probability and thresholded map side by side."""
    maps = [np.asarray(m).reshape(np.asarray(m).shape[:2]) for m in (label, prob, binary)]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, m, name in zip(axes, maps, ("label", "probability", "hotspots")):
        im = ax.imshow(m, vmin=0.0, vmax=max(1.0, float(m.max())), cmap="viridis")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes, shrink=0.8)
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_roc(curves: dict, path: str | os.PathLike) -> None:
    """``curves`` maps a name to ``(scores, truth_bin)``."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (scores, truth) in curves.items():
        fpr, tpr = roc_curve(scores, truth)
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], color="grey", lw=0.8, ls=":")
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
