"""Matplotlib figures written next to the CSV/JSON artifacts."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import diff_images  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_kernel_bank(bank, path) -> Path:
    stack = bank.stack()
    n = len(stack)
    cols = min(n, 6)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.7 * rows), squeeze=False)
    lim = float(np.abs(stack).max()) or 1.0
    for ax, k, angle in zip(axes.flat, stack, bank.angles):
        ax.imshow(k, cmap="RdBu_r", vmin=-lim, vmax=lim)
        ax.set_title(f"{angle:g}°", fontsize=8)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    return _save(fig, path)


def plot_loss_curves(rows, path, columns=("mae", "dssim", "varc", "feat_dist", "total")) -> Path:
    it = np.array([r["iter"] for r in rows])
    fig, axes = plt.subplots(1, len(columns), figsize=(3.0 * len(columns), 2.6))
    for ax, col in zip(np.atleast_1d(axes), columns):
        ax.plot(it, [r[col] for r in rows], lw=0.6)
        ax.set_title(col, fontsize=9)
        ax.set_xlabel("iteration", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_victim_curve(rows, path) -> Path:
    it = np.array([r["iter"] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 2.8))
    ax.plot(it, [r["loss"] for r in rows], lw=0.5, label="loss")
    ax2 = ax.twinx()
    ax2.plot(it, [r["lr"] for r in rows], color="gray", lw=1.0, label="lr")
    ax.set_xlabel("iteration")
    ax.set_ylabel("cross-entropy")
    ax2.set_ylabel("learning rate")
    return _save(fig, path)


def plot_accuracy(report, path) -> Path:
    classes = list(report.classes)
    x = np.arange(len(classes))
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(x - 0.2, [report.original_acc[c] for c in classes], 0.4, label="original")
    ax.bar(x + 0.2, [report.adversarial_acc[c] for c in classes], 0.4, label="adversarial")
    ax.set_xticks(x, classes)
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy [%]")
    ax.set_title(report.victim_name)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_triptychs(original, adversarial, labels, path, k: int = 6) -> Path:
    """Rows of original / adversarial / normalized difference."""
    k = min(k, len(original))
    diff = diff_images(original[:k], adversarial[:k])
    fig, axes = plt.subplots(k, 3, figsize=(4.5, 1.6 * k), squeeze=False)
    for i in range(k):
        for j, img in enumerate((original[i], adversarial[i], diff[i])):
            ax = axes[i, j]
            ax.imshow(np.clip(np.asarray(img).transpose(1, 2, 0), 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[i, 0].set_ylabel(str(labels[i]), fontsize=8)
    for j, title in enumerate(("original", "adversarial", "|diff|")):
        axes[0, j].set_title(title, fontsize=9)
    return _save(fig, path)
