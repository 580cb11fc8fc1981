"""Figures for training runs, evaluation reports and single-image localization."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CORNER_LABELS = ("TL", "TR", "BR", "BL")


def _finite(values):
    return [v if v is not None and not (isinstance(v, float) and math.isnan(v)) else np.nan for v in values]


def plot_training(history: list, path) -> None:
    """Loss terms and validation IoU per epoch, side by side."""
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_iou) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key, label in (("det_loss", "detection"), ("seg_loss", "segmentation"), ("total_loss", "total")):
        ax_loss.plot(epochs, _finite([row.get(key) for row in history]), marker="o", label=label)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss per step")
    ax_loss.legend(frameon=False)
    ax_iou.plot(epochs, _finite([row.get("val_iou") for row in history]), marker="o", color="k")
    ax_iou.set_xlabel("epoch")
    ax_iou.set_ylabel("val IoU (combined)")
    ax_iou.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_iou_by_distortion(reports: dict, path) -> None:
    """Grouped bars: one group per distortion key, one bar per labelled report."""
    labels = list(reports)
    keys = list(next(iter(reports.values())).keys()) if reports else []
    width = 0.8 / max(len(labels), 1)
    fig, ax = plt.subplots(figsize=(1.2 * len(keys) + 2, 3.5))
    x = np.arange(len(keys))
    for i, label in enumerate(labels):
        ax.bar(x + i * width - 0.4 + width / 2, [reports[label][k] for k in keys], width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(keys)
    ax.set_ylabel("mean IoU (%)")
    ax.set_ylim(0, 100)
    if len(labels) > 1:
        ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_localization(image: np.ndarray, vertices, path, truth=None) -> None:
    """Image with the predicted quadrilateral (and optionally the ground truth) drawn on top."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(np.clip(image, 0, 1))
    v = np.asarray(vertices, dtype=float)
    closed = np.vstack([v, v[:1]])
    ax.plot(closed[:, 0], closed[:, 1], "-o", color="tab:red", lw=1.5, ms=3, label="predicted")
    for (x, y), name in zip(v, CORNER_LABELS):
        ax.annotate(name, (x, y), color="tab:red", fontsize=8, xytext=(3, 3), textcoords="offset points")
    if truth is not None:
        t = np.asarray(truth, dtype=float)
        t = np.vstack([t, t[:1]])
        ax.plot(t[:, 0], t[:, 1], "--", color="tab:green", lw=1.0, label="ground truth")
        ax.legend(frameon=False, fontsize="small", loc="lower right")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
