"""Report rendering: PGM mask overlays, per-sample CSV tables, and the
matplotlib figures written next to every report and training log."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ParseError
from .masks import BinaryMask
from .metrics import MetricsReport, save_report


def render_overlay(mask: BinaryMask, path) -> None:
    """Write the mask as a binary PGM (P5): foreground 255, background 0."""
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    payload = (mask.pixels.astype(np.uint8) * 255).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_pgm(path) -> BinaryMask:
    """Read a binary P5 file back into a mask (any nonzero byte is set)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = raw.split(maxsplit=4)
    if len(fields) < 5 or fields[0] != b"P5":
        raise ParseError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ParseError(f"{path}: unsupported maxval {maxval}")
    payload = fields[4][: h * w]
    if len(payload) != h * w:
        raise ParseError(f"{path}: expected {h * w} pixel bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape((h, w)) > 0
    return BinaryMask(pixels)


def _sibling(path, suffix: str) -> str:
    stem, _ = os.path.splitext(str(path))
    return stem + suffix


def write_report_files(report: MetricsReport, json_path) -> dict:
    """Write the metrics report plus its delimited table and summary figure.

    Returns the paths written: the JSON report, a per-sample CSV next to it,
    and a PNG with the aggregate bars and the per-sample IoU histogram.
    """
    save_report(report, json_path)
    csv_path = _sibling(json_path, ".csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "iou"])
        for image_id, value in report.per_sample:
            writer.writerow([image_id, repr(value)])
    png_path = _sibling(json_path, ".png")
    values = [v for _, v in report.per_sample]
    fig, (ax_bars, ax_hist) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_bars.bar(["gIoU", "cIoU", "ncIoU"], [report.giou, report.ciou, report.nciou],
                color=["#4878d0", "#ee854a", "#6acc64"])
    ax_bars.set_ylim(0.0, 1.0)
    ax_bars.set_ylabel("score")
    ax_bars.set_title(f"aggregate metrics (n={report.sample_count})")
    ax_hist.hist(values, bins=20, range=(0.0, 1.0), color="#4878d0")
    ax_hist.set_xlabel("per-sample IoU")
    ax_hist.set_ylabel("samples")
    ax_hist.set_title("IoU distribution")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return {"report": str(json_path), "csv": csv_path, "figure": png_path}


def write_training_figure(log_records, log_path) -> str:
    """Loss and learning-rate curves saved next to the JSONL log."""
    png_path = _sibling(log_path, ".png")
    steps = [r["step"] for r in log_records]
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(steps, [r["loss_total"] for r in log_records], label="total")
    ax_loss.plot(steps, [r["loss_iou"] for r in log_records], label="iou head")
    ax_loss.plot(steps, [r["loss_iop"] for r in log_records], label="iop head")
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_lr.plot(steps, [r["lr"] for r in log_records], color="#ee854a")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path
