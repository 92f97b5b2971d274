"""Figures written next to the CLI's CSV and JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imageio import tone_map  # noqa: E402


def loss_curve(history, path) -> None:
    """Train and validation loss against optimizer step, log scale."""
    rows = np.asarray(history, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.2), dpi=120)
    ax.semilogy(rows[:, 0], rows[:, 1], label="train")
    if np.any(np.isfinite(rows[:, 2])):
        ax.semilogy(rows[:, 0], rows[:, 2], label="validation")
    ax.set_xlabel("step")
    ax.set_ylabel("squared error (log space)")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def comparison(a, b, labels, path) -> None:
    """Tone-mapped images side by side plus the per-pixel absolute difference."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b).mean(axis=2)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2), dpi=120)
    for ax, img, title in zip(axes[:2], (a, b), labels):
        ax.imshow(tone_map(img), interpolation="nearest")
        ax.set_title(title)
    im = axes[2].imshow(diff, cmap="magma", interpolation="nearest")
    axes[2].set_title("|difference|")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
