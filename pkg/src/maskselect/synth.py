"""Synthetic desk-scale tasks: rectangle objects on a canvas, a painted
feature grid, jittered proposals, and a noisy query vector standing in for
the upstream segmenter/encoder/language-model outputs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DataMissing, InvalidConfig, ParseError
from .masks import (
    BinaryMask,
    FeatureGrid,
    coverage_weights,
    mask_pool,
    read_feature_grid,
    union_masks,
    write_feature_grid,
)
from .model import read_seg_vector, write_seg_vector
from .proposals import (
    MaskProposal,
    ProposalSet,
    TargetVector,
    label_targets,
    load_proposal_set,
    save_proposal_set,
)
from .masks import iou

INDEX_FILE = "index.json"


@dataclass(frozen=True)
class SynthConfig:
    canvas_h: int = 64
    canvas_w: int = 64
    grid_h: int = 16
    grid_w: int = 16
    channels: int = 32
    objects_min: int = 2
    objects_max: int = 5
    targets_min: int = 1
    targets_max: int = 2
    size_min: int = 16
    size_max: int = 28
    jitter: int = 2
    seg_noise: float = 0.05
    distractors: int = 2
    background_noise: float = 0.02
    # feature vocabulary shared by all corpora with the same vocab_seed, the
    # way a frozen encoder maps recurring object kinds to recurring features
    vocab_size: int = 8
    vocab_seed: int = 0

    def __post_init__(self):
        if not (1 <= self.objects_min <= self.objects_max):
            raise InvalidConfig("invalid object count range")
        if not (1 <= self.targets_min <= self.targets_max <= self.objects_min):
            raise InvalidConfig("target range must fit the minimum object count")
        if self.size_min < 2 or self.size_max >= min(self.canvas_h, self.canvas_w):
            raise InvalidConfig("object sizes must fit the canvas")
        if self.jitter < 0 or self.seg_noise < 0:
            raise InvalidConfig("jitter and noise must be nonnegative")
        if self.vocab_size < self.objects_max:
            raise InvalidConfig("vocabulary must cover the maximum object count")


@dataclass
class SyntheticSample:
    image_id: str
    features: FeatureGrid
    proposals: ProposalSet
    gt_mask: BinaryMask
    seg_token: np.ndarray
    targets: TargetVector


def _unit_vector(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _rect_mask(h: int, w: int, top: int, bottom: int, left: int, right: int) -> BinaryMask:
    pixels = np.zeros((h, w), dtype=bool)
    pixels[top:bottom, left:right] = True
    return BinaryMask(pixels)


def _place_objects(rng: np.random.Generator, cfg: SynthConfig, n_objects: int):
    """Random rectangles, rejection-sampled to keep pairwise overlap under
    10% of the new rectangle (best effort so placement always terminates)."""
    rects: list[tuple[int, int, int, int]] = []
    for _ in range(n_objects):
        best = None
        for _attempt in range(60):
            rh = int(rng.integers(cfg.size_min, cfg.size_max + 1))
            rw = int(rng.integers(cfg.size_min, cfg.size_max + 1))
            top = int(rng.integers(0, cfg.canvas_h - rh + 1))
            left = int(rng.integers(0, cfg.canvas_w - rw + 1))
            rect = (top, top + rh, left, left + rw)
            overlap = 0
            for other in rects:
                oh = max(0, min(rect[1], other[1]) - max(rect[0], other[0]))
                ow = max(0, min(rect[3], other[3]) - max(rect[2], other[2]))
                overlap = max(overlap, oh * ow)
            best = rect
            if overlap <= 0.10 * rh * rw:
                break
        rects.append(best)
    return rects


def _jitter_rect(rng: np.random.Generator, cfg: SynthConfig,
                 rect: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    """Move one randomly chosen edge by a delta in [-jitter, jitter]."""
    top, bottom, left, right = rect
    if cfg.jitter == 0:
        return rect
    delta = int(rng.integers(-cfg.jitter, cfg.jitter + 1))
    edge = int(rng.integers(0, 4))
    if edge == 0:
        top = min(max(top + delta, 0), bottom - 1)
    elif edge == 1:
        bottom = max(min(bottom + delta, cfg.canvas_h), top + 1)
    elif edge == 2:
        left = min(max(left + delta, 0), right - 1)
    else:
        right = max(min(right + delta, cfg.canvas_w), left + 1)
    return top, bottom, left, right


def feature_vocabulary(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """(vocab_size, channels) unit vectors plus the background vector; a
    deterministic function of vocab_seed only, so separately generated
    corpora share the same feature space."""
    vocab_rng = np.random.default_rng(cfg.vocab_seed)
    vocab = np.vstack([_unit_vector(vocab_rng, cfg.channels)
                       for _ in range(cfg.vocab_size)])
    background = _unit_vector(vocab_rng, cfg.channels)
    return vocab, background


def synth_generate(n: int, cfg: SynthConfig, seed: int) -> list[SyntheticSample]:
    """Deterministic synthetic samples for training and evaluating the
    selection model without any upstream model."""
    if n < 0:
        raise InvalidConfig(f"sample count must be nonnegative, got {n}")
    rng = np.random.default_rng(seed)
    vocab, background = feature_vocabulary(cfg)
    samples = []
    for idx in range(n):
        n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
        rects = _place_objects(rng, cfg, n_objects)
        object_masks = [_rect_mask(cfg.canvas_h, cfg.canvas_w, *r) for r in rects]
        kinds = rng.choice(cfg.vocab_size, size=n_objects, replace=False)
        object_vecs = [vocab[k] for k in kinds]

        # feature grid: noisy background, object vectors painted over footprints
        grid = background[None, None, :] + cfg.background_noise * rng.standard_normal(
            (cfg.grid_h, cfg.grid_w, cfg.channels)
        )
        for mask, vec in zip(object_masks, object_vecs):
            # a cell belongs to the object that majority-covers it
            footprint = coverage_weights(mask, cfg.grid_h, cfg.grid_w) >= 0.5
            grid[footprint] = vec
        features = FeatureGrid(grid)

        n_targets = int(rng.integers(cfg.targets_min, cfg.targets_max + 1))
        target_ids = sorted(rng.choice(n_objects, size=n_targets, replace=False).tolist())
        gt = union_masks([object_masks[t] for t in target_ids])

        proposals = []
        for mask, rect in zip(object_masks, rects):
            jittered = _rect_mask(cfg.canvas_h, cfg.canvas_w,
                                  *_jitter_rect(rng, cfg, rect))
            proposals.append(
                MaskProposal(mask=jittered, predicted_iou=iou(jittered, mask))
            )
        for _ in range(cfg.distractors):
            dh = int(rng.integers(6, 13))
            dw = int(rng.integers(6, 13))
            top = int(rng.integers(0, cfg.canvas_h - dh + 1))
            left = int(rng.integers(0, cfg.canvas_w - dw + 1))
            dmask = _rect_mask(cfg.canvas_h, cfg.canvas_w, top, top + dh, left, left + dw)
            score = max(iou(dmask, m) for m in object_masks)
            proposals.append(MaskProposal(mask=dmask, predicted_iou=score))

        pset = ProposalSet(
            image_id=f"synth_{idx:05d}",
            image_h=cfg.canvas_h,
            image_w=cfg.canvas_w,
            proposals=tuple(proposals),
        )
        seg = np.mean([object_vecs[t] for t in target_ids], axis=0)
        seg = seg + cfg.seg_noise * rng.standard_normal(cfg.channels)
        samples.append(
            SyntheticSample(
                image_id=pset.image_id,
                features=features,
                proposals=pset,
                gt_mask=gt,
                seg_token=seg,
                targets=label_targets(pset, gt),
            )
        )
    return samples


# ---------------------------------------------------------------- embeddings

def pool_embeddings(sample: SyntheticSample) -> np.ndarray:
    """(K, channels) matrix of pooled mask embeddings, proposal order."""
    rows = [mask_pool(sample.features, p.mask)[0] for p in sample.proposals.proposals]
    if not rows:
        return np.zeros((0, sample.features.channels))
    return np.vstack(rows)


# ---------------------------------------------------------------- persistence

def save_samples(samples, outdir) -> None:
    os.makedirs(outdir, exist_ok=True)
    ids = []
    for sample in samples:
        prefix = sample.image_id
        ids.append(prefix)
        write_feature_grid(sample.features, os.path.join(outdir, f"{prefix}.fgrd"))
        write_seg_vector(sample.seg_token, os.path.join(outdir, f"{prefix}.segv"))
        save_proposal_set(sample.proposals, os.path.join(outdir, f"{prefix}.proposals.json"))
        gt_obj = {
            "image_id": sample.image_id,
            "mask": sample.gt_mask.to_json(),
            "ious": list(sample.targets.ious),
            "iops": list(sample.targets.iops),
        }
        with open(os.path.join(outdir, f"{prefix}.gt.json"), "w", encoding="utf-8") as fh:
            json.dump(gt_obj, fh)
            fh.write("\n")
    with open(os.path.join(outdir, INDEX_FILE), "w", encoding="utf-8") as fh:
        json.dump({"samples": ids}, fh)
        fh.write("\n")


def load_samples(datadir) -> list[SyntheticSample]:
    index_path = os.path.join(datadir, INDEX_FILE)
    if not os.path.isfile(index_path):
        raise DataMissing(f"no {INDEX_FILE} in {datadir}")
    with open(index_path, "r", encoding="utf-8") as fh:
        try:
            ids = json.load(fh)["samples"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise ParseError(f"{index_path}: {exc}") from exc
    samples = []
    for prefix in ids:
        features = read_feature_grid(os.path.join(datadir, f"{prefix}.fgrd"))
        seg = read_seg_vector(os.path.join(datadir, f"{prefix}.segv"))
        pset = load_proposal_set(os.path.join(datadir, f"{prefix}.proposals.json"))
        with open(os.path.join(datadir, f"{prefix}.gt.json"), "r", encoding="utf-8") as fh:
            gt_obj = json.load(fh)
        gt = BinaryMask.from_json(gt_obj["mask"])
        targets = TargetVector(ious=tuple(gt_obj["ious"]), iops=tuple(gt_obj["iops"]))
        samples.append(
            SyntheticSample(
                image_id=prefix,
                features=features,
                proposals=pset,
                gt_mask=gt,
                seg_token=seg,
                targets=targets,
            )
        )
    if not samples:
        raise DataMissing(f"{datadir} contains no samples")
    return samples
