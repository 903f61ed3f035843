"""Figures written next to the JSON/CSV reports."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
})


def savefig(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curves(records: list[dict], path: str | Path) -> Path:
    """Mean training loss per phase and mean validation F1 against epoch."""
    loss = defaultdict(lambda: defaultdict(list))
    val = defaultdict(list)
    for r in records:
        loss[r["phase"]][r["epoch"]].append(r["train_loss"])
        if r.get("val_f1") is not None:
            val[r["epoch"]].append(r["val_f1"])
    fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(8, 3))
    for phase, by_epoch in loss.items():
        epochs = sorted(by_epoch)
        ax_loss.plot(epochs, [np.mean(by_epoch[e]) for e in epochs], label=phase)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    if loss:
        ax_loss.legend(frameon=False)
    if val:
        epochs = sorted(val)
        ax_f1.plot(epochs, [np.mean(val[e]) for e in epochs], color="C3")
    ax_f1.set_xlabel("epoch")
    ax_f1.set_ylabel("mean validation F1")
    ax_f1.set_ylim(0, 1)
    return savefig(fig, path)


def plot_sample_metrics(rows: list[dict], path: str | Path) -> Path:
    """Per-sample precision, recall and F1 as grouped bars."""
    ids = [r["sample_id"] for r in rows]
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(4, 0.25 * len(ids) + 1), 3))
    for k, key in enumerate(("p", "r", "f1")):
        ax.bar(x + (k - 1) * 0.27, [r[key] for r in rows], width=0.27, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(ids, rotation=90, fontsize=6)
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, ncol=3)
    return savefig(fig, path)
