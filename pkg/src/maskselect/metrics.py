"""Dataset-level segmentation metrics: mean IoU, cumulative IoU, and
size-normalized cumulative IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .errors import DimensionMismatch, EmptyInput, InvalidSize
from .masks import BinaryMask, iou, overlap_counts, resize_nearest

DEFAULT_NORM_SIZE = 512


@dataclass(frozen=True)
class EvalSample:
    prediction: BinaryMask
    ground_truth: BinaryMask
    image_id: str

    def __post_init__(self):
        if self.prediction.pixels.shape != self.ground_truth.pixels.shape:
            raise DimensionMismatch(
                f"{self.image_id}: prediction {self.prediction.pixels.shape} vs "
                f"ground truth {self.ground_truth.pixels.shape}"
            )


@dataclass(frozen=True)
class MetricsReport:
    giou: float
    ciou: float
    nciou: float
    norm_size: int
    sample_count: int
    per_sample: tuple[tuple[str, float], ...]  # (image_id, iou), sorted by id

    def to_json(self) -> dict:
        return {
            "giou": self.giou,
            "ciou": self.ciou,
            "nciou": self.nciou,
            "norm_size": self.norm_size,
            "n": self.sample_count,
            "per_sample": [
                {"image_id": image_id, "iou": value}
                for image_id, value in self.per_sample
            ],
        }


def _require_samples(samples: Sequence[EvalSample]):
    if len(samples) == 0:
        raise EmptyInput("metrics need at least one sample")


def giou(samples: Sequence[EvalSample]) -> float:
    """Mean of per-sample IoUs."""
    _require_samples(samples)
    return sum(iou(s.prediction, s.ground_truth) for s in samples) / len(samples)


def ciou(samples: Sequence[EvalSample]) -> float:
    """Total intersection pixels over total union pixels, summed as exact
    integers before the single division; 1.0 when every pair is empty."""
    _require_samples(samples)
    inter_total = 0
    union_total = 0
    for s in samples:
        inter, union = overlap_counts(s.prediction, s.ground_truth)
        inter_total += inter
        union_total += union
    if union_total == 0:
        return 1.0
    return inter_total / union_total


def nciou(samples: Sequence[EvalSample], norm_size: int = DEFAULT_NORM_SIZE) -> float:
    """Cumulative IoU after resizing every pair to norm_size x norm_size,
    removing the image-size weighting from the cumulative sums."""
    if norm_size < 1:
        raise InvalidSize(f"norm_size must be >= 1, got {norm_size}")
    _require_samples(samples)
    resized = [
        EvalSample(
            prediction=resize_nearest(s.prediction, norm_size, norm_size),
            ground_truth=resize_nearest(s.ground_truth, norm_size, norm_size),
            image_id=s.image_id,
        )
        for s in samples
    ]
    return ciou(resized)


def build_report(samples: Sequence[EvalSample], norm_size: int = DEFAULT_NORM_SIZE) -> MetricsReport:
    _require_samples(samples)
    ordered = sorted(samples, key=lambda s: s.image_id)
    per_sample = tuple((s.image_id, iou(s.prediction, s.ground_truth)) for s in ordered)
    return MetricsReport(
        giou=giou(ordered),
        ciou=ciou(ordered),
        nciou=nciou(ordered, norm_size),
        norm_size=norm_size,
        sample_count=len(ordered),
        per_sample=per_sample,
    )


def save_report(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
