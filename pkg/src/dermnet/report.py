"""Matplotlib figures written next to the line-record outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datasets import CLASSES  # noqa: E402
from .metrics import MetricsReport  # noqa: E402

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # fixed metadata so re-rendering the same data gives the same file
    "svg.hashsalt": "dermnet",
}

SHORT_NAMES = ("MEL", "NEV", "SK")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path, title: str = "training") -> Path:
    """Loss curve with any ``val_*`` metrics on a twin axis."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        epochs = [r["epoch"] for r in history]
        ax.plot(epochs, [r["loss"] for r in history], "o-", color="k", lw=1, ms=3, label="loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        keys = sorted({k for r in history for k in r if k.startswith("val_")})
        if keys:
            ax2 = ax.twinx()
            ax2.spines["right"].set_visible(True)
            for key in keys:
                ax2.plot(epochs, [r.get(key, np.nan) for r in history], "s--", lw=1, ms=3, label=key)
            ax2.set_ylim(0, 1.02)
            ax2.set_ylabel("validation")
            ax2.legend(loc="lower right", frameon=False)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_confusion(report: MetricsReport, path) -> Path:
    m = report.classification.confusion
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.4, 3))
        ax.imshow(m, cmap="Blues", vmin=0)
        for (i, j), v in np.ndenumerate(m):
            ax.text(j, i, str(v), ha="center", va="center",
                    color="white" if v > m.max() / 2 else "black")
        ax.set_xticks(range(len(CLASSES)), SHORT_NAMES)
        ax.set_yticks(range(len(CLASSES)), SHORT_NAMES)
        ax.set_xlabel("predicted")
        ax.set_ylabel("truth")
        ax.set_title(f"{report.split}: accuracy {report.classification.accuracy:.3f}")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_overlap(report: MetricsReport, path) -> Path:
    seg = report.segmentation
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        bins = np.linspace(0, 1, 21)
        ax.hist(seg.jaccard, bins=bins, alpha=0.7, label="Jaccard")
        ax.hist(seg.dice, bins=bins, alpha=0.5, label="Dice")
        ax.axvline(seg.mean_jaccard, color="k", lw=1, ls="--")
        ax.set_xlabel("per-image score")
        ax.set_ylabel("images")
        ax.set_title(f"{report.split}: mean Jaccard {seg.mean_jaccard:.3f}")
        ax.legend(frameon=False, loc="upper left")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_overlay(image: np.ndarray, mask: np.ndarray, path, truth: Optional[np.ndarray] = None) -> Path:
    """Image with predicted (and optional true) lesion outline."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(image)
        ax.contour(mask.astype(float), levels=[0.5], colors="cyan", linewidths=1)
        if truth is not None:
            ax.contour(truth.astype(float), levels=[0.5], colors="yellow", linewidths=1, linestyles="dashed")
        ax.set_axis_off()
        fig.tight_layout()
        return _save(fig, Path(path))


def write_report_figures(report: MetricsReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = []
    if report.segmentation is not None:
        paths.append(plot_overlap(report, out / f"{report.split}_overlap.png"))
    if report.classification is not None:
        paths.append(plot_confusion(report, out / f"{report.split}_confusion.png"))
    return paths
