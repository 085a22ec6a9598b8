"""Matplotlib figures written next to the CLI's delimited text output.

All figures go through :func:`save_figure`, which strips the software tag from
PNG metadata so that identical data yields byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "lines.linewidth": 1.2,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
}

PALETTE = ["#08589e", "#e6550d", "#31a354", "#756bb1", "#636363"]


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def curves(path, series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
           xlabel: str = "step", ylabel: str = "", logy: bool = False) -> Path:
    """Line plot of named (x, y) series."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        for i, (name, (x, y)) in enumerate(series.items()):
            ax.plot(np.asarray(x), np.asarray(y), label=name, color=PALETTE[i % len(PALETTE)])
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend(loc="best")
        fig.tight_layout()
        return save_figure(fig, path)


def image_grid(path, rows: Sequence[Sequence[np.ndarray]], row_labels: Sequence[str] = (),
               col_labels: Sequence[str] = ()) -> Path:
    """Grid of (3, H, W) images or (H, W) masks, one subplot per cell."""
    nr, nc = len(rows), max(len(r) for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nr, nc, figsize=(1.3 * nc, 1.3 * nr), squeeze=False)
        for i, row in enumerate(rows):
            for j in range(nc):
                ax = axes[i][j]
                ax.set_xticks([])
                ax.set_yticks([])
                ax.grid(False)
                if j >= len(row):
                    ax.axis("off")
                    continue
                im = np.asarray(row[j])
                if im.ndim == 3:
                    ax.imshow(np.clip(im.transpose(1, 2, 0), 0.0, 1.0), interpolation="nearest")
                else:
                    ax.imshow(im, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
                if i == 0 and j < len(col_labels):
                    ax.set_title(col_labels[j])
            if i < len(row_labels):
                axes[i][0].set_ylabel(row_labels[i])
        fig.tight_layout()
        return save_figure(fig, path)


def bars(path, labels: Sequence[str], values: Sequence[float], ylabel: str = "", title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(2.5, 0.45 * len(labels) + 1.0), 2.6))
        ax.bar(range(len(values)), values, color=PALETTE[0])
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return save_figure(fig, path)
