"""Matplotlib report figures rendered to files alongside the CSV outputs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .synthdata import COLORS

_CHANNEL_RGB = {
    "red": (0.85, 0.2, 0.2),
    "green": (0.2, 0.7, 0.3),
    "blue": (0.25, 0.4, 0.85),
    "yellow": (0.9, 0.8, 0.2),
    "purple": (0.6, 0.3, 0.7),
    "orange": (0.95, 0.55, 0.15),
}


def raster_to_rgb(raster: np.ndarray) -> np.ndarray:
    """Channelized coverage raster -> displayable RGB image."""
    h, w = raster.shape[1:]
    img = np.ones((h, w, 3), dtype=np.float32)
    for ci, color in enumerate(COLORS):
        rgb = np.array(_CHANNEL_RGB[color], dtype=np.float32)
        cov = raster[ci][..., None]
        img = img * (1 - cov) + rgb * cov
    return np.clip(img, 0, 1)


def _draw_box(ax, box, color, label=None):
    x0, y0, x1, y1 = box
    ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False,
                               edgecolor=color, linewidth=1.6, label=label))


def save_metrics_figure(metrics_csv, out_png):
    with open(metrics_csv) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("l_text", "l_det", "l_cyc", "l_seg", "total"):
        vals = [float(r[key]) for r in rows]
        if any(v != 0.0 for v in vals):
            ax.plot(steps, vals, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("training loss components")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def save_comparison_figure(reports, out_png):
    """Grouped bars of the headline rate per scheme."""
    schemes = [r.scheme for r in reports]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = np.arange(len(schemes))
    metric = []
    label = "rate"
    for r in reports:
        if r.acc_at_05 is not None:
            metric.append(r.acc_at_05)
            label = "Acc@0.5"
        elif r.vqa_accuracy is not None:
            metric.append(r.vqa_accuracy)
            label = "VQA accuracy"
        else:
            metric.append(0.0)
    ax.bar(xs, metric, width=0.55, color="#4878d0")
    ax.set_xticks(xs, schemes)
    ax.set_ylim(0, 1)
    ax.set_ylabel(label)
    ax.set_title(f"{reports[0].task}: scheme comparison")
    for x, v in zip(xs, metric):
        ax.text(x, v + 0.02, f"{v:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def save_prediction_figure(records, dataset, out_png, max_panels: int = 9):
    """Scenes with ground-truth (green) and predicted (red) boxes."""
    records = records[:max_panels]
    if not records:
        return
    n = len(records)
    cols = min(3, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, rec in zip(axes.flat, records):
        img = raster_to_rgb(dataset.raster(rec["scene_id"]))
        ax.imshow(img, extent=(0, 1, 1, 0))
        ax.axis("on")
        ax.set_xticks([])
        ax.set_yticks([])
        if rec.get("gt_box") is not None:
            _draw_box(ax, rec["gt_box"], "#2a2")
        if rec.get("pred_box") is not None:
            _draw_box(ax, rec["pred_box"], "#d22")
        title = f"IoU {rec['iou']:.2f}" if rec.get("iou") is not None else rec.get("note", "")
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def save_mask_figure(records, dataset, out_png, max_panels: int = 4):
    """Predicted masks against ground truth for a few samples."""
    records = [r for r in records if r.get("pred_mask") is not None][:max_panels]
    if not records:
        return
    n = len(records)
    fig, axes = plt.subplots(n, 3, figsize=(7.5, 2.5 * n), squeeze=False)
    for i, rec in enumerate(records):
        img = raster_to_rgb(dataset.raster(rec["scene_id"]))
        axes[i][0].imshow(img, extent=(0, 1, 1, 0))
        axes[i][0].set_title("scene", fontsize=8)
        axes[i][1].imshow(rec["gt_mask"], cmap="gray", vmin=0, vmax=1)
        axes[i][1].set_title("target mask", fontsize=8)
        axes[i][2].imshow(rec["pred_mask"], cmap="gray", vmin=0, vmax=1)
        axes[i][2].set_title(f"predicted (IoU {rec.get('mask_iou', 0):.2f})", fontsize=8)
        for ax in axes[i]:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)
