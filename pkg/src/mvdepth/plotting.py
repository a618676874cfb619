"""Matplotlib figures written next to CLI outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible across runs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_loss_curve(losses, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean epsilon MSE")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_depth_grid(depths: np.ndarray, path, labels=None, mask: np.ndarray | None = None) -> Path:
    """One row of normalised depth maps; background (+1) is drawn white."""
    depths = np.asarray(depths)
    n = len(depths)
    fig, axes = plt.subplots(1, n, figsize=(2 * n, 2.2), squeeze=False)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("white")
    for i, ax in enumerate(axes[0]):
        shown = np.ma.masked_where(depths[i] >= 1 - 1e-4, depths[i])
        if mask is not None:
            shown = np.ma.masked_where(~mask[i], shown)
        ax.imshow(shown, cmap=cmap, vmin=-1, vmax=1)
        ax.set_title(labels[i] if labels is not None else str(i), fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_metrics(report: dict, path) -> Path:
    keys = list(report)
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(keys)), 3.5))
    ax.bar(range(len(keys)), [report[k] for k in keys], color="tab:blue")
    ax.set_xticks(range(len(keys)), keys, rotation=45, ha="right")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
