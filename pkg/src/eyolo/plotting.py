"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (6.0, 3.8)


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curve(history: Sequence[Tuple[int, float, float]], path) -> Path:
    """Per-epoch mean loss on a log axis, training and validation."""
    epochs = [h[0] for h in history]
    train = [h[1] for h in history]
    val = [h[2] for h in history]
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax.plot(epochs, train, label="training", color="tab:blue")
    if not all(np.isnan(val)):
        ax.plot(epochs, val, label="validation", color="tab:orange")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss per sample")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _finish(fig, path)


def plot_iou_histogram(report, path) -> Path:
    cols = (
        ("2D IoU", [m.iou_2d for m in report.matches]),
        ("3D IoU", [m.iou_3d for m in report.matches]),
        ("3D IoU^(2/3)", [m.iou_3d_23 for m in report.matches]),
    )
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.0), sharey=True)
    bins = np.linspace(0.0, 1.0, 21)
    for ax, (title, values) in zip(axes, cols):
        ax.hist(values, bins=bins, color="tab:green", edgecolor="black", linewidth=0.5)
        ax.axvline(float(np.mean(values)), color="black", linestyle="--", linewidth=1)
        ax.set_title(title)
        ax.set_xlim(0, 1)
    axes[0].set_ylabel("ground-truth boxes")
    return _finish(fig, path)


def plot_bench(report, path) -> Path:
    fig, (left, right) = plt.subplots(1, 2, figsize=(8.0, 3.2))
    left.bar([report.method], [report.fps], color="tab:blue")
    left.set_ylabel("fps")
    left.tick_params(axis="x", labelsize=7)
    right.bar(["3D single pass", "2D two pass"], [report.nms3d_ms, report.nms2d_ms], color=["tab:green", "tab:gray"])
    right.set_ylabel(f"NMS median ms ({report.nms_candidates} boxes)")
    return _finish(fig, path)
