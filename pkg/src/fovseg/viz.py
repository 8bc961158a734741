"""Figure rendering: patch layout overlays, evaluation heatmaps, loss curves.

All figures render headlessly to files next to the delimited outputs they
illustrate.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

# Patch outlines by size; larger sizes cool, finest red.
SIZE_COLORS = {16: "purple", 8: "gold", 4: "green", 2: "blue", 1: "red"}
EXTRA_COLORS = ("cyan", "magenta", "orange", "lime")


def size_color(size: int) -> str:
    if size in SIZE_COLORS:
        return SIZE_COLORS[size]
    return EXTRA_COLORS[size % len(EXTRA_COLORS)]


def save_patch_overlay(image: np.ndarray, specs, path):
    """Render the sampled patch layout over the image, color-coded by size."""
    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(8, 8 * h / w))
    ax.imshow(image, extent=(0, w, h, 0), interpolation="nearest")
    for spec in specs:
        half = spec.size / 2
        ax.add_patch(Rectangle((spec.center_x - half, spec.center_y - half),
                               spec.size, spec.size, fill=False,
                               edgecolor=size_color(spec.size), linewidth=0.7))
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.set_axis_off()
    fig.savefig(path, dpi=150, bbox_inches="tight", pad_inches=0)
    plt.close(fig)


def write_patch_records(specs, path):
    """One plain-text record per patch: resolution_index size cx cy."""
    lines = ["# resolution_index\tsize\tcenter_x\tcenter_y"]
    for spec in specs:
        lines.append(f"{spec.resolution_index}\t{spec.size}\t"
                     f"{spec.center_x:.6f}\t{spec.center_y:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_heatmap_png(report, path):
    """IoU heatmap over (relative area, absolute footprint) bins."""
    fig, ax = plt.subplots(figsize=(7, 5))
    grid = np.ma.masked_invalid(report.heat_iou)
    im = ax.imshow(grid, origin="lower", aspect="auto", vmin=0.0, vmax=1.0,
                   cmap="viridis")
    ax.set_xticks(np.arange(len(report.area_edges)) - 0.5)
    ax.set_xticklabels([f"{e:.2g}" for e in report.area_edges],
                       rotation=45, fontsize=8)
    ax.set_yticks(np.arange(len(report.footprint_edges)) - 0.5)
    ax.set_yticklabels([f"{e:.3g}" for e in report.footprint_edges], fontsize=8)
    ax.set_xlabel("relative mask area")
    ax.set_ylabel("absolute footprint (px)")
    ax.set_title(f"mean IoU ({report.total} scenes)")
    for (i, j), count in np.ndenumerate(report.heat_count):
        if count > 0:
            ax.text(j, i, f"{report.heat_iou[i, j]:.2f}", ha="center",
                    va="center", fontsize=7,
                    color="white" if report.heat_iou[i, j] < 0.6 else "black")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curve(log_csv, path):
    """Loss and mean per-group IoU over training steps."""
    steps, losses, ious = [], [], []
    with open(log_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            losses.append(float(row["loss"]))
            ious.append(float(row["mean_group_iou"]))
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(steps, losses, lw=0.8, color="tab:blue", label="loss")
    ax1.set_xlabel("step")
    ax1.set_ylabel("sparse BCE loss", color="tab:blue")
    ax1.set_yscale("log")
    ax2 = ax1.twinx()
    ax2.plot(steps, ious, lw=0.8, color="tab:orange", label="group IoU")
    ax2.set_ylabel("mean per-group IoU", color="tab:orange")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
