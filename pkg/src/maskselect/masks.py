"""Binary masks: RLE codec, overlap measures, resizing, and mask pooling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    InvalidSize,
    LengthMismatch,
    ParseError,
    SchemaVersionMismatch,
)

FGRD_MAGIC = b"FGRD"
FGRD_VERSION = 1


@dataclass(frozen=True)
class BinaryMask:
    """A dense H x W binary mask.

    Pixels are held as a read-only boolean array so masks can be shared
    freely across threads. All pixel counting is exact integer arithmetic.
    """

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 2:
            raise InvalidSize(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidSize(f"mask dimensions must be >= 1, got {arr.shape}")
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def area(self) -> int:
        """Number of foreground pixels."""
        return int(np.count_nonzero(self.pixels))

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))

    @classmethod
    def zeros(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.zeros((h, w), dtype=bool))

    @classmethod
    def ones(cls, h: int, w: int) -> "BinaryMask":
        return cls(np.ones((h, w), dtype=bool))

    @classmethod
    def from_rle(cls, counts: Sequence[int], h: int, w: int) -> "BinaryMask":
        return rle_decode(counts, h, w)

    def to_rle(self) -> list[int]:
        return rle_encode(self)

    @classmethod
    def from_json(cls, obj) -> "BinaryMask":
        """Parse the mask JSON object {"h", "w", "counts"}."""
        if not isinstance(obj, dict):
            raise ParseError(f"mask JSON must be an object, got {type(obj).__name__}")
        try:
            h, w, counts = obj["h"], obj["w"], obj["counts"]
        except KeyError as exc:
            raise ParseError(f"mask JSON missing key {exc}") from exc
        if not isinstance(h, int) or not isinstance(w, int):
            raise ParseError("mask JSON h/w must be integers")
        try:
            return rle_decode(counts, h, w)
        except LengthMismatch as exc:
            raise ParseError(str(exc)) from exc

    def to_json(self) -> dict:
        return {"h": self.height, "w": self.width, "counts": self.to_rle()}


def rle_encode(mask: BinaryMask) -> list[int]:
    """Encode a dense mask as column-major run lengths, first run background.

    The output is canonical: a leading zero appears only when pixel (0, 0)
    is foreground, and every other run length is positive.
    """
    flat = mask.pixels.ravel(order="F")
    counts: list[int] = []
    if flat[0]:
        counts.append(0)
    # boundaries between runs of equal values
    change = np.nonzero(flat[1:] != flat[:-1])[0] + 1
    prev = 0
    for idx in change:
        counts.append(int(idx - prev))
        prev = int(idx)
    counts.append(int(flat.size - prev))
    return counts


def rle_decode(counts: Iterable[int], h: int, w: int) -> BinaryMask:
    """Decode column-major run lengths into a dense h x w mask."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise LengthMismatch(f"negative run length in {counts!r}")
    total = sum(counts)
    if total != h * w:
        raise LengthMismatch(f"run lengths sum to {total}, expected {h}*{w}={h * w}")
    values = np.arange(len(counts)) % 2  # runs alternate starting at background
    flat = np.repeat(values.astype(bool), counts)
    return BinaryMask(flat.reshape((w, h)).T)


def _require_same_size(a: BinaryMask, b: BinaryMask):
    if a.pixels.shape != b.pixels.shape:
        raise DimensionMismatch(
            f"mask sizes differ: {a.pixels.shape} vs {b.pixels.shape}"
        )


def overlap_counts(a: BinaryMask, b: BinaryMask) -> tuple[int, int]:
    """Exact (intersection, union) pixel counts of two same-size masks."""
    _require_same_size(a, b)
    inter = int(np.count_nonzero(a.pixels & b.pixels))
    union = int(np.count_nonzero(a.pixels | b.pixels))
    return inter, union


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    inter, union = overlap_counts(a, b)
    if union == 0:
        return 1.0
    return inter / union


def iop(pred: BinaryMask, gt: BinaryMask) -> float:
    """Intersection over prediction |gt & pred| / |pred|; 0.0 for empty pred."""
    _require_same_size(pred, gt)
    pred_area = pred.area
    if pred_area == 0:
        return 0.0
    inter = int(np.count_nonzero(pred.pixels & gt.pixels))
    return inter / pred_area


def union_masks(masks: Sequence[BinaryMask]) -> BinaryMask:
    """Pixelwise OR of one or more same-size masks."""
    if len(masks) == 0:
        raise EmptyInput("union_masks needs at least one mask")
    acc = masks[0].pixels.copy()
    for m in masks[1:]:
        _require_same_size(masks[0], m)
        acc |= m.pixels
    return BinaryMask(acc)


def resize_nearest(mask: BinaryMask, out_h: int, out_w: int) -> BinaryMask:
    """Nearest-neighbor resample; identity when the size is unchanged."""
    if out_h < 1 or out_w < 1:
        raise InvalidSize(f"target size must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == (mask.height, mask.width):
        return mask
    # pixel-center mapping: output center i+0.5 lands at source row (i+0.5)*h/out_h
    rows = np.minimum(
        ((np.arange(out_h) + 0.5) * mask.height / out_h).astype(np.int64),
        mask.height - 1,
    )
    cols = np.minimum(
        ((np.arange(out_w) + 0.5) * mask.width / out_w).astype(np.int64),
        mask.width - 1,
    )
    return BinaryMask(mask.pixels[np.ix_(rows, cols)])


def _axis_overlap(n_pixels: int, n_cells: int) -> np.ndarray:
    """(n_cells, n_pixels) matrix of overlap lengths between unit pixels
    and equal cells covering the same extent."""
    step = n_pixels / n_cells
    cell_lo = np.arange(n_cells)[:, None] * step
    cell_hi = cell_lo + step
    pix_lo = np.arange(n_pixels)[None, :].astype(float)
    pix_hi = pix_lo + 1.0
    return np.clip(np.minimum(cell_hi, pix_hi) - np.maximum(cell_lo, pix_lo), 0.0, None)


def coverage_weights(mask: BinaryMask, grid_h: int, grid_w: int) -> np.ndarray:
    """Per-cell fraction of the cell's pixel footprint that is foreground.

    Pixels are treated as unit squares and split fractionally across cells,
    so footprints are exact areas even when sizes do not divide evenly.
    """
    if grid_h < 1 or grid_w < 1:
        raise InvalidSize(f"grid dimensions must be >= 1, got {grid_h}x{grid_w}")
    row_ov = _axis_overlap(mask.height, grid_h)
    col_ov = _axis_overlap(mask.width, grid_w)
    fg_area = row_ov @ mask.pixels.astype(np.float64) @ col_ov.T
    cell_area = (mask.height / grid_h) * (mask.width / grid_w)
    return fg_area / cell_area


@dataclass(frozen=True)
class FeatureGrid:
    """An h x w x c feature map ingested from an external image encoder."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 3:
            raise InvalidSize(f"feature grid must be 3-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidSize("feature grid contains non-finite values")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


def mask_pool(features: FeatureGrid, mask: BinaryMask) -> tuple[np.ndarray, bool]:
    """Coverage-weighted mean of cell feature vectors over the mask footprint.

    Returns (embedding, degenerate). An all-background mask cannot be pooled;
    the unweighted mean of all cells is returned with degenerate=True.
    """
    weights = coverage_weights(mask, features.grid_h, features.grid_w)
    total = weights.sum()
    flat = features.values.reshape(-1, features.channels)
    if total == 0.0:
        return flat.mean(axis=0), True
    pooled = (weights.reshape(-1, 1) * flat).sum(axis=0) / total
    return pooled, False


def write_feature_grid(grid: FeatureGrid, path) -> None:
    """Write the FGRD binary format (float32 little-endian payload)."""
    header = FGRD_MAGIC + struct.pack(
        "<IIII", FGRD_VERSION, grid.grid_h, grid.grid_w, grid.channels
    )
    payload = grid.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_feature_grid(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 20:
        raise ParseError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != FGRD_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    version, gh, gw, c = struct.unpack("<IIII", raw[4:20])
    if version != FGRD_VERSION:
        raise SchemaVersionMismatch(f"{path}: FGRD version {version}, expected 1")
    expected = 20 + gh * gw * c * 4
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=20).astype(np.float64)
    return FeatureGrid(values.reshape((gh, gw, c)))
