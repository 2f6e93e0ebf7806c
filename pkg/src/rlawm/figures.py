"""Matplotlib figures written next to the delimited report output."""

import matplotlib

matplotlib.use("Agg")

import numpy as np
import matplotlib.pyplot as plt

_SAVE = {"dpi": 110, "bbox_inches": "tight"}


def save_loss_curves(path, curves: dict, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, values in curves.items():
        if values:
            ax.plot(np.arange(1, len(values) + 1), values, label=label, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(frameon=False, fontsize=8)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_image_grid(path, rows, row_labels=None, col_labels=None,
                    title: str = None) -> None:
    """rows: list of lists of (H, W, 3) arrays in [0, 1]."""
    n_rows = len(rows)
    n_cols = max(len(r) for r in rows)
    fig, axes = plt.subplots(n_rows, n_cols,
                             figsize=(1.3 * n_cols, 1.4 * n_rows), squeeze=False)
    for i, row in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(row):
                ax.imshow(np.clip(row[j], 0, 1))
            else:
                ax.axis("off")
            if i == 0 and col_labels and j < len(col_labels):
                ax.set_title(col_labels[j], fontsize=7)
        if row_labels and i < len(row_labels):
            axes[i][0].set_ylabel(row_labels[i], fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_bar(path, labels, values, title: str = "", ylabel: str = "") -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.12 * len(labels)), 3.0))
    ax.bar(np.arange(len(values)), values, width=0.8)
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, fontsize=6, rotation=90)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=9)
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def save_reward_curves(path, series: dict, title: str = "reward") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, label=str(label), lw=1.2, marker="o", ms=2.5)
    ax.set_xlabel("update")
    ax.set_ylabel("mean episodic reward")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
