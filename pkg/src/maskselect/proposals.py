"""Mask proposal sets: predicted-IoU filtering, NMS, and target labeling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, ParseError, SchemaVersionMismatch
from .masks import BinaryMask, iop, iou

PROPOSAL_SCHEMA_VERSION = 1

# Defaults for everything-mode postprocessing. The upstream generator scores
# each mask with a predicted IoU; low scores are dropped, near-duplicates are
# suppressed, and the set is capped.
DEFAULT_IOU_FILTER = 0.85
DEFAULT_NMS_THRESHOLD = 0.7
DEFAULT_MAX_PROPOSALS = 64


@dataclass(frozen=True)
class MaskProposal:
    mask: BinaryMask
    predicted_iou: float
    source_point: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if not 0.0 <= self.predicted_iou <= 1.0:
            raise InvalidConfig(f"predicted_iou {self.predicted_iou} outside [0, 1]")
        if self.source_point is not None:
            object.__setattr__(self, "source_point", tuple(self.source_point))


@dataclass(frozen=True)
class ProposalSet:
    image_id: str
    image_h: int
    image_w: int
    proposals: tuple[MaskProposal, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        for p in self.proposals:
            if (p.mask.height, p.mask.width) != (self.image_h, self.image_w):
                raise DimensionMismatch(
                    f"proposal mask {p.mask.height}x{p.mask.width} does not match "
                    f"image {self.image_h}x{self.image_w}"
                )

    def __len__(self) -> int:
        return len(self.proposals)


@dataclass(frozen=True)
class TargetVector:
    """Ground-truth IoU and IoP of every proposal against one target mask."""

    ious: tuple[float, ...]
    iops: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ious", tuple(float(v) for v in self.ious))
        object.__setattr__(self, "iops", tuple(float(v) for v in self.iops))
        if len(self.ious) != len(self.iops):
            raise DimensionMismatch("ious and iops lengths differ")


def filter_by_predicted_iou(pset: ProposalSet, threshold: float) -> ProposalSet:
    """Keep proposals whose predicted IoU is >= threshold, order preserved."""
    kept = tuple(p for p in pset.proposals if p.predicted_iou >= threshold)
    return replace(pset, proposals=kept)


def nms(pset: ProposalSet, iou_threshold: float) -> ProposalSet:
    """Greedy non-maximum suppression on true mask IoU.

    Proposals are visited by descending predicted_iou (ties keep the lower
    original index); each kept proposal suppresses every remaining one whose
    mask IoU with it exceeds the threshold.
    """
    order = sorted(
        range(len(pset.proposals)),
        key=lambda k: (-pset.proposals[k].predicted_iou, k),
    )
    kept: list[int] = []
    alive = [True] * len(order)
    for pos, idx in enumerate(order):
        if not alive[pos]:
            continue
        kept.append(idx)
        kept_mask = pset.proposals[idx].mask
        for later in range(pos + 1, len(order)):
            if alive[later] and iou(kept_mask, pset.proposals[order[later]].mask) > iou_threshold:
                alive[later] = False
    return replace(pset, proposals=tuple(pset.proposals[i] for i in kept))


def truncate(pset: ProposalSet, max_proposals: int) -> ProposalSet:
    """Keep the max_proposals highest-scored proposals (ties by index)."""
    if len(pset.proposals) <= max_proposals:
        return pset
    order = sorted(
        range(len(pset.proposals)),
        key=lambda k: (-pset.proposals[k].predicted_iou, k),
    )[:max_proposals]
    return replace(pset, proposals=tuple(pset.proposals[i] for i in sorted(order)))


def postprocess(
    pset: ProposalSet,
    iou_filter: float = DEFAULT_IOU_FILTER,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    max_proposals: int = DEFAULT_MAX_PROPOSALS,
) -> ProposalSet:
    """Everything-mode postprocess: score filter, then NMS, then cap."""
    return truncate(nms(filter_by_predicted_iou(pset, iou_filter), nms_threshold), max_proposals)


def label_targets(pset: ProposalSet, gt: BinaryMask) -> TargetVector:
    """Per-proposal ground-truth IoU and IoP against the target mask."""
    if (gt.height, gt.width) != (pset.image_h, pset.image_w):
        raise DimensionMismatch(
            f"ground truth {gt.height}x{gt.width} does not match "
            f"image {pset.image_h}x{pset.image_w}"
        )
    ious = tuple(iou(p.mask, gt) for p in pset.proposals)
    iops = tuple(iop(p.mask, gt) for p in pset.proposals)
    return TargetVector(ious=ious, iops=iops)


def proposal_set_to_json(pset: ProposalSet) -> dict:
    return {
        "version": PROPOSAL_SCHEMA_VERSION,
        "image_id": pset.image_id,
        "h": pset.image_h,
        "w": pset.image_w,
        "proposals": [
            {
                "predicted_iou": p.predicted_iou,
                "mask": p.mask.to_json(),
                "point": list(p.source_point) if p.source_point is not None else None,
            }
            for p in pset.proposals
        ],
    }


def proposal_set_from_json(obj: dict) -> ProposalSet:
    version = obj.get("version", 1)
    if version != PROPOSAL_SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"proposal file version {version}, expected 1")
    try:
        raw = obj["proposals"]
        proposals = tuple(
            MaskProposal(
                mask=BinaryMask.from_json(entry["mask"]),
                predicted_iou=float(entry["predicted_iou"]),
                source_point=tuple(entry["point"]) if entry.get("point") else None,
            )
            for entry in raw
        )
        return ProposalSet(
            image_id=obj["image_id"],
            image_h=int(obj["h"]),
            image_w=int(obj["w"]),
            proposals=proposals,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed proposal file: {exc}") from exc


def save_proposal_set(pset: ProposalSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(proposal_set_to_json(pset), fh)
        fh.write("\n")


def load_proposal_set(path) -> ProposalSet:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    return proposal_set_from_json(obj)
