"""Matplotlib figure rendering for the CLI report paths.

Figures are written next to the tab-separated outputs they illustrate:
training curves beside train.log, metric bars beside report.tsv, spectrum
panels beside the grayscale dumps, and the ablation comparison chart beside
ablation.tsv. Rendering is headless (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(epochs, path) -> None:
    """Loss and validation metrics vs epoch from a list of EpochStats."""
    xs = [e.epoch for e in epochs]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(xs, [e.train_loss for e in epochs], color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_metric.plot(xs, [e.val_dsc for e in epochs], label="val DSC", color="tab:blue")
    ax_metric.plot(xs, [e.val_iou for e in epochs], label="val IoU", color="tab:green")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylim(0.0, 1.05)
    ax_metric.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_bars(report, path) -> None:
    """Per-class DSC/IoU bars plus an HD95 bar panel for a MetricReport."""
    labels = [f"class {k}" for k in report.class_ids]
    x = np.arange(len(labels))
    fig, (ax_overlap, ax_dist) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_overlap.bar(x - 0.2, report.dsc, width=0.4, label="DSC", color="tab:blue")
    ax_overlap.bar(x + 0.2, report.iou, width=0.4, label="IoU", color="tab:green")
    ax_overlap.set_xticks(x, labels)
    ax_overlap.set_ylim(0.0, 1.05)
    ax_overlap.legend(loc="lower right")
    ax_dist.bar(x, report.hd95, width=0.5, color="tab:orange")
    ax_dist.set_xticks(x, labels)
    ax_dist.set_ylabel("HD95 (px)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_spectrum_panel(images: dict[str, np.ndarray], path) -> None:
    """Heatmap panel of the grayscale spectrum dumps (masks + filter)."""
    names = list(images)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.2))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        ax.imshow(images[name], cmap="magma", interpolation="nearest")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_chart(rows: list[dict], path) -> None:
    """Grouped val DSC/IoU bars for the four MPCA/FSA variants."""
    labels = [r["variant"] for r in rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(6.5, 3.5))
    ax.bar(x - 0.2, [r["val_dsc"] for r in rows], width=0.4, label="val DSC", color="tab:blue")
    ax.bar(x + 0.2, [r["val_iou"] for r in rows], width=0.4, label="val IoU", color="tab:green")
    ax.set_xticks(x, labels)
    ax.set_ylim(0.0, 1.05)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
