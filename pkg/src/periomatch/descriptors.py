"""Block-based LBP and HOG descriptors.

The image is partitioned into an 8x8 grid of non-overlapping blocks; each
block contributes an 8-bin L1-normalized histogram, concatenated into a
512-value descriptor.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .preprocess import validate_gray

GRID_ROWS = 8
GRID_COLS = 8
BINS_PER_BLOCK = 8
DESCRIPTOR_LENGTH = GRID_ROWS * GRID_COLS * BINS_PER_BLOCK

# LBP labels 0..255 quantized into 8 equal-width ranges of 32
LBP_LABELS_PER_BIN = 256 // BINS_PER_BLOCK

# HOG: unsigned orientations in [0, 180) quantized into 8 bins
HOG_BIN_WIDTH_DEG = 180.0 / BINS_PER_BLOCK
HOG_NORM_EPS = 1e-10

MIN_IMAGE_SIDE = 10


@dataclass(frozen=True)
class BlockGrid:
    """Non-overlapping partition of a (height, width) image into 8x8 blocks.

    row_edges/col_edges have 9 entries each; block (i, j) covers the
    half-open pixel ranges [row_edges[i], row_edges[i+1]) x
    [col_edges[j], col_edges[j+1]).  The first 7 rows/cols use floor
    division, the last absorbs the remainder.
    """

    width: int
    height: int
    row_edges: tuple[int, ...]
    col_edges: tuple[int, ...]

    def block_of(self, y: int, x: int) -> tuple[int, int]:
        i = int(np.searchsorted(self.row_edges, y, side="right")) - 1
        j = int(np.searchsorted(self.col_edges, x, side="right")) - 1
        return min(i, GRID_ROWS - 1), min(j, GRID_COLS - 1)


@dataclass
class FeatureVector:
    """Flat real feature vector with extractor provenance."""

    values: np.ndarray
    extractor: str
    layer: str | None = None
    source: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()

    def __len__(self) -> int:
        return self.values.size


def block_partition(width: int, height: int) -> BlockGrid:
    """Partition a width x height image into the 8x8 block grid."""
    if width < GRID_COLS or height < GRID_ROWS:
        raise InvalidInputError(
            f"image {width}x{height} too small for {GRID_COLS}x{GRID_ROWS} blocks"
        )
    row_edges = tuple(i * (height // GRID_ROWS) for i in range(GRID_ROWS)) + (height,)
    col_edges = tuple(j * (width // GRID_COLS) for j in range(GRID_COLS)) + (width,)
    return BlockGrid(width=width, height=height, row_edges=row_edges, col_edges=col_edges)


def _block_index_maps(grid: BlockGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel block row/col ids as (height,), (width,) int arrays."""
    row_ids = np.searchsorted(np.asarray(grid.row_edges), np.arange(grid.height), side="right") - 1
    col_ids = np.searchsorted(np.asarray(grid.col_edges), np.arange(grid.width), side="right") - 1
    return np.minimum(row_ids, GRID_ROWS - 1), np.minimum(col_ids, GRID_COLS - 1)


def _normalize_blocks(hists: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """L1-normalize each row; all-zero rows stay zero."""
    sums = hists.sum(axis=1, keepdims=True)
    if eps > 0.0:
        return hists / (sums + eps)
    out = np.zeros_like(hists)
    nz = sums[:, 0] > 0
    out[nz] = hists[nz] / sums[nz]
    return out


def lbp_labels(img: np.ndarray) -> np.ndarray:
    """8-bit LBP label for every interior pixel, shape (H-2, W-2).

    Each of the 8 neighbors of the 3x3 neighborhood is compared against the
    center (neighbor >= center sets the bit); bits are assembled clockwise
    from the top-left neighbor, most significant bit first.
    """
    c = img[1:-1, 1:-1]
    # clockwise from top-left: TL, T, TR, R, BR, B, BL, L
    neighbors = (
        img[:-2, :-2], img[:-2, 1:-1], img[:-2, 2:],
        img[1:-1, 2:],
        img[2:, 2:], img[2:, 1:-1], img[2:, :-2],
        img[1:-1, :-2],
    )
    labels = np.zeros(c.shape, dtype=np.int64)
    for k, nb in enumerate(neighbors):
        labels |= (nb >= c).astype(np.int64) << (7 - k)
    return labels


def lbp_descriptor(img: np.ndarray, source: str | None = None) -> FeatureVector:
    """Block LBP histogram descriptor (64 blocks x 8 label-range bins)."""
    arr = validate_gray(img)
    h, w = arr.shape
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise InvalidInputError(f"image {w}x{h} too small for LBP (min {MIN_IMAGE_SIDE})")
    grid = block_partition(w, h)
    labels = lbp_labels(arr)
    row_ids, col_ids = _block_index_maps(grid)
    block_id = row_ids[1:-1, None] * GRID_COLS + col_ids[None, 1:-1]
    bin_id = labels // LBP_LABELS_PER_BIN
    flat = block_id.ravel() * BINS_PER_BLOCK + bin_id.ravel()
    hists = np.bincount(flat, minlength=DESCRIPTOR_LENGTH).astype(np.float64)
    hists = hists.reshape(GRID_ROWS * GRID_COLS, BINS_PER_BLOCK)
    return FeatureVector(_normalize_blocks(hists).ravel(), extractor="lbp", source=source)


def _gradients(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences with replicated edges."""
    padded = np.pad(img, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return gx, gy


def hog_descriptor(img: np.ndarray, source: str | None = None) -> FeatureVector:
    """Block HOG descriptor: magnitude-weighted unsigned orientations.

    Orientation bin centers sit at (k + 0.5) * 22.5 degrees; each gradient's
    magnitude is split linearly between the two nearest centers with
    wrap-around at 180 degrees.
    """
    arr = validate_gray(img)
    h, w = arr.shape
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise InvalidInputError(f"image {w}x{h} too small for HOG (min {MIN_IMAGE_SIDE})")
    grid = block_partition(w, h)
    gx, gy = _gradients(arr)
    mag = np.hypot(gx, gy)
    theta = np.degrees(np.arctan2(gy, gx)) % 180.0

    pos = theta / HOG_BIN_WIDTH_DEG - 0.5
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo %= BINS_PER_BLOCK
    hi = (lo + 1) % BINS_PER_BLOCK

    row_ids, col_ids = _block_index_maps(grid)
    block_id = (row_ids[:, None] * GRID_COLS + col_ids[None, :]).ravel()
    lo_idx = block_id * BINS_PER_BLOCK + lo.ravel()
    hi_idx = block_id * BINS_PER_BLOCK + hi.ravel()
    weights_lo = (mag * (1.0 - frac)).ravel()
    weights_hi = (mag * frac).ravel()
    hists = np.bincount(lo_idx, weights=weights_lo, minlength=DESCRIPTOR_LENGTH)
    hists += np.bincount(hi_idx, weights=weights_hi, minlength=DESCRIPTOR_LENGTH)
    hists = hists.reshape(GRID_ROWS * GRID_COLS, BINS_PER_BLOCK)
    return FeatureVector(
        _normalize_blocks(hists, eps=HOG_NORM_EPS).ravel(), extractor="hog", source=source
    )


def save_feature(path: str | Path, fv: FeatureVector) -> None:
    """Write a feature vector: one-line JSON header, u32-LE count, f32-LE data."""
    header = {"extractor": fv.extractor, "layer": fv.layer, "source": fv.source}
    data = np.asarray(fv.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        f.write(struct.pack("<I", data.size))
        f.write(data.tobytes(order="C"))


def load_feature(path: str | Path) -> FeatureVector:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"bad feature header in {path}: {exc}") from exc
        raw_count = f.read(4)
        if len(raw_count) != 4:
            raise InvalidInputError(f"truncated feature file: {path}")
        (count,) = struct.unpack("<I", raw_count)
        payload = f.read()
    if len(payload) != 4 * count:
        raise InvalidInputError(
            f"feature payload is {len(payload)} bytes, expected {4 * count}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return FeatureVector(
        values,
        extractor=header.get("extractor", "unknown"),
        layer=header.get("layer"),
        source=header.get("source"),
    )
