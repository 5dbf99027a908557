"""Report rendering: CSV/text tables for metric rows and matplotlib
figures written to files alongside them."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .metrics import MetricRow
from .training import TrainHistory
from .volumetry import FluidReport

METRIC_COLUMNS = ["label", "aroc_mean", "aroc_std", "iou_mean", "iou_std", "f1_mean", "f1_std"]


def write_metric_csv(rows: Sequence[MetricRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([
                row.label,
                f"{row.aroc_mean:.4f}", f"{row.aroc_std:.4f}",
                f"{row.iou_mean:.4f}", f"{row.iou_std:.4f}",
                f"{row.f1_mean:.4f}", f"{row.f1_std:.4f}",
            ])


def format_metric_table(rows: Sequence[MetricRow]) -> str:
    """Fixed-width table of mean +/- population std per model; the best row
    (by mean F1) is starred."""
    lines = [
        "Fluid segmentation agreement (mean +/- population std across volumes)",
        f"{'model':<16} {'AROC':>16} {'IoU':>16} {'F1':>16}",
    ]
    for row in rows:
        star = "*" if row.best else " "
        lines.append(
            f"{row.label:<15}{star} "
            f"{row.aroc_mean:.3f} +/- {row.aroc_std:.3f} "
            f"{row.iou_mean:.3f} +/- {row.iou_std:.3f} "
            f"{row.f1_mean:.3f} +/- {row.f1_std:.3f}"
        )
    skipped = sum(row.aroc_skipped for row in rows)
    if skipped:
        lines.append(f"(AROC skipped for {skipped} single-class volume evaluations)")
    return "\n".join(lines) + "\n"


def render_beta_sweep(rows: Sequence[MetricRow], path: str | Path) -> None:
    """F1/IoU/AROC versus fusion factor, with the OCT-only model as a
    dashed reference line."""
    fused = [(float(r.label.split("=")[1]), r) for r in rows if r.label.startswith("beta=")]
    fused.sort()
    fig, ax = plt.subplots(figsize=(6, 4))
    if fused:
        xs = [b for b, _ in fused]
        for attr, style in (("f1_mean", "o-"), ("iou_mean", "s-"), ("aroc_mean", "^-")):
            ax.plot(xs, [getattr(r, attr) for _, r in fused], style,
                    label=attr.replace("_mean", "").upper())
    for row in rows:
        if row.label == "oct-only":
            ax.axhline(row.f1_mean, color="gray", linestyle="--", label="F1 oct-only")
    ax.set_xlabel("fusion factor")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_curves(history: TrainHistory, path: str | Path) -> None:
    epochs = [r.epoch for r in history.records]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True,
                                   gridspec_kw={"height_ratios": [3, 1]})
    ax1.plot(epochs, [r.train_loss for r in history.records], "o-", label="train")
    ax1.plot(epochs, [r.val_loss for r in history.records], "s-", label="validation")
    ax1.set_ylabel("loss")
    ax1.legend()
    ax1.grid(alpha=0.3)
    ax2.semilogy(epochs, [r.lr for r in history.records], "k-")
    ax2.set_ylabel("lr")
    ax2.set_xlabel("epoch")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_grayscale_png(image: np.ndarray, path: str | Path, vmax: float | None = None) -> None:
    """8-bit grayscale export; values scaled from [0, vmax] (vmax defaults
    to the image max, with all-zero images staying black)."""
    img = np.asarray(image, dtype=np.float64)
    if vmax is None:
        vmax = float(img.max())
    scaled = np.zeros_like(img) if vmax <= 0 else np.clip(img / vmax, 0.0, 1.0)
    Image.fromarray((scaled * 255.0).round().astype(np.uint8), mode="L").save(path)


def render_thickness_figure(report: FluidReport, spacing_um, path: str | Path) -> None:
    """Thickness map with a colorbar in micrometers and the CMT in the title."""
    b_um, _, l_um = spacing_um
    nb, nw = report.thickness_map.shape
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    im = ax.imshow(
        report.thickness_map,
        extent=(0, nw * l_um / 1000.0, nb * b_um / 1000.0, 0),
        cmap="viridis",
        aspect="equal",
    )
    fig.colorbar(im, ax=ax, label="thickness (um)")
    cmt = "n/a" if report.cmt_um is None else f"{report.cmt_um:.0f} um"
    ax.set_title(f"retinal thickness (CMT {cmt}, fluid {report.total_volume_mm3:.4f} mm^3)")
    ax.set_xlabel("width (mm)")
    ax.set_ylabel("B-scan position (mm)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_enface_figure(mask: np.ndarray, area_mm2: float, spacing_um, path: str | Path) -> None:
    b_um, _, l_um = spacing_um
    nb, nw = mask.shape
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.imshow(
        mask,
        extent=(0, nw * l_um / 1000.0, nb * b_um / 1000.0, 0),
        cmap="gray",
        aspect="equal",
        interpolation="nearest",
    )
    ax.set_title(f"en-face fluid projection ({area_mm2:.3f} mm^2)")
    ax.set_xlabel("width (mm)")
    ax.set_ylabel("B-scan position (mm)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
