"""Geometric and photometric normalization of annotated eye images.

Images are plain 2-D float64 arrays with intensities in [0, 1] (row-major,
``img[y, x]``).  The pipeline is: grayscale conversion, rescaling so the
annotated sclera radius matches a per-distance-group target, extraction of a
square region of side ``7.6 * target_radius`` around the sclera center,
CLAHE contrast normalization, iris masking, and (for the neural feature path
only) pixel-wise mean subtraction.  All operations are pure functions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError

# BT.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# Side of the normalized ROI as a multiple of the target sclera radius
ROI_RADIUS_FACTOR = 7.6

# Catmull-Rom bicubic kernel parameter
BICUBIC_A = -0.5

CLAHE_TILES = (8, 8)
CLAHE_CLIP_LIMIT = 0.01
CLAHE_BINS = 256


@dataclass(frozen=True)
class EyeAnnotation:
    """Manually annotated eye geometry plus identity metadata.

    Coordinates are pixels in the image the annotation belongs to; a user is
    identified by (subject_id, eye).
    """

    subject_id: str
    eye: str  # "left" or "right"
    session: int
    distance_m: float
    sclera_center: tuple[float, float]
    sclera_radius: float
    iris_center: tuple[float, float]
    iris_radius: float

    def __post_init__(self):
        if self.eye not in ("left", "right"):
            raise InvalidInputError(f"eye must be 'left' or 'right', got {self.eye!r}")
        if self.session < 1:
            raise InvalidInputError("session must be >= 1")
        if not (self.sclera_radius > self.iris_radius > 0):
            raise InvalidInputError(
                "annotation requires sclera_radius > iris_radius > 0, got "
                f"{self.sclera_radius} / {self.iris_radius}"
            )

    @property
    def user_key(self) -> str:
        return f"{self.subject_id}:{self.eye}"


@dataclass(frozen=True)
class RoiImage:
    """Square normalized region of interest.

    ``annotation`` carries the eye circles mapped into ROI pixel
    coordinates (radii multiplied by ``scale_factor``).
    """

    image: np.ndarray
    scale_factor: float
    annotation: EyeAnnotation

    def __post_init__(self):
        h, w = self.image.shape
        if h != w:
            raise InvalidInputError(f"ROI must be square, got {w}x{h}")

    @property
    def side(self) -> int:
        return self.image.shape[0]


def validate_gray(img: np.ndarray) -> np.ndarray:
    """Check the 2-D [0,1] image convention; returns the array unchanged."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"expected 2-D grayscale image, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidInputError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InvalidInputError("image values must lie in [0, 1]")
    return arr


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG or JPEG file to a float array in [0, 1].

    Returns (H, W) for single-channel files and (H, W, 3) otherwise.
    """
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0 if im.mode != "L" else 255.0
            return np.clip(arr / peak, 0.0, 1.0)
        rgb = im.convert("RGB")
        return np.asarray(rgb, dtype=np.float64) / 255.0


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Convert a 3-channel raster in [0,1] to grayscale by BT.601 luma."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) raster, got shape {arr.shape}")
    r, g, b = GRAY_WEIGHTS
    gray = r * arr[:, :, 0] + g * arr[:, :, 1] + b * arr[:, :, 2]
    return np.clip(gray, 0.0, 1.0)


def _catmull_rom(x: np.ndarray) -> np.ndarray:
    """Bicubic interpolation kernel with a = -0.5."""
    a = BICUBIC_A
    ax = np.abs(x)
    out = np.zeros_like(ax)
    near = ax <= 1.0
    far = (ax > 1.0) & (ax < 2.0)
    out[near] = (a + 2.0) * ax[near] ** 3 - (a + 3.0) * ax[near] ** 2 + 1.0
    out[far] = a * ax[far] ** 3 - 5.0 * a * ax[far] ** 2 + 8.0 * a * ax[far] - 4.0 * a
    return out


def _resample_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) row-stochastic matrix of Catmull-Rom weights.

    Sample positions use pixel-center alignment; out-of-range taps are
    clamped to the border (edge replication).
    """
    scale = n_src / n_dst
    src = (np.arange(n_dst) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    t = src - base
    mat = np.zeros((n_dst, n_src))
    for k in range(-1, 3):
        w = _catmull_rom(t - k)
        idx = np.clip(base + k, 0, n_src - 1)
        np.add.at(mat, (np.arange(n_dst), idx), w)
    return mat


def resize_bicubic(img: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Resize with the Catmull-Rom bicubic kernel; output clamped to [0,1]."""
    arr = validate_gray(img)
    if target_w < 1 or target_h < 1:
        raise InvalidInputError(f"target dimensions must be >= 1, got {target_w}x{target_h}")
    h, w = arr.shape
    rows = _resample_matrix(h, target_h)
    cols = _resample_matrix(w, target_w)
    out = rows @ arr @ cols.T
    return np.clip(out, 0.0, 1.0)


def scale_annotation(ann: EyeAnnotation, sx: float, sy: float, radius_scale: float) -> EyeAnnotation:
    """Map annotation circles through an axis-aligned rescaling.

    Centers follow the pixel-center alignment used by resize_bicubic.
    """

    def map_center(c):
        return ((c[0] + 0.5) * sx - 0.5, (c[1] + 0.5) * sy - 0.5)

    return replace(
        ann,
        sclera_center=map_center(ann.sclera_center),
        sclera_radius=ann.sclera_radius * radius_scale,
        iris_center=map_center(ann.iris_center),
        iris_radius=ann.iris_radius * radius_scale,
    )


def normalize_and_crop(img: np.ndarray, ann: EyeAnnotation, target_radius: float) -> RoiImage:
    """Rescale so the sclera radius matches target_radius, then crop the ROI.

    The output is the square of side ``round(7.6 * target_radius)`` centered
    on the rescaled sclera center; pixels beyond the image border are filled
    by edge replication.  The returned RoiImage carries the annotation mapped
    into ROI coordinates, ready for mask_iris.
    """
    arr = validate_gray(img)
    if target_radius <= 0:
        raise InvalidInputError("target_radius must be positive")
    h, w = arr.shape
    cx, cy = ann.sclera_center
    if not (0 <= cx < w and 0 <= cy < h):
        raise InvalidInputError(f"sclera center {ann.sclera_center} outside image {w}x{h}")
    ix, iy = ann.iris_center
    if not (0 <= ix < w and 0 <= iy < h):
        raise InvalidInputError(f"iris center {ann.iris_center} outside image {w}x{h}")

    scale = target_radius / ann.sclera_radius
    new_w = max(1, int(round(w * scale)))
    new_h = max(1, int(round(h * scale)))
    resized = arr if (new_w, new_h) == (w, h) else resize_bicubic(arr, new_w, new_h)

    sx, sy = new_w / w, new_h / h
    scaled = scale_annotation(ann, sx, sy, scale)

    side = int(round(ROI_RADIUS_FACTOR * target_radius))
    side = max(side, 1)
    scx, scy = scaled.sclera_center
    left = int(round(scx - (side - 1) / 2.0))
    top = int(round(scy - (side - 1) / 2.0))

    col_idx = np.clip(np.arange(left, left + side), 0, new_w - 1)
    row_idx = np.clip(np.arange(top, top + side), 0, new_h - 1)
    roi = resized[np.ix_(row_idx, col_idx)]

    roi_ann = replace(
        scaled,
        sclera_center=(scx - left, scy - top),
        iris_center=(scaled.iris_center[0] - left, scaled.iris_center[1] - top),
    )
    return RoiImage(image=roi, scale_factor=scale, annotation=roi_ann)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    """Tile boundaries: first tiles-1 use floor division, last absorbs the rest."""
    size = n // tiles
    edges = [i * size for i in range(tiles)] + [n]
    return np.asarray(edges)


def _clip_histogram(hist: np.ndarray, clip: float, max_rounds: int = 100) -> np.ndarray:
    """Clip histogram bins at `clip` and spread the excess uniformly.

    Redistribution can push bins back over the limit, so it is iterated;
    any residue after max_rounds is spread evenly regardless of the limit.
    """
    h = hist.astype(np.float64)
    excess = float(np.maximum(h - clip, 0.0).sum())
    h = np.minimum(h, clip)
    total = h.sum() + excess
    for _ in range(max_rounds):
        if excess <= 1e-12 * max(total, 1.0):
            break
        h += excess / h.size
        over = np.maximum(h - clip, 0.0)
        excess = float(over.sum())
        h = np.minimum(h, clip)
    else:
        h += excess / h.size
    return h


def clahe(
    img: np.ndarray,
    tiles: tuple[int, int] = CLAHE_TILES,
    clip_limit: float = CLAHE_CLIP_LIMIT,
    nbins: int = CLAHE_BINS,
) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Per-tile histograms are clipped at ``clip_limit`` (as a fraction of the
    tile pixel count) with the excess redistributed uniformly; each tile's
    midpoint-CDF mapping is blended bilinearly between tile centers.
    Zero-contrast tiles (all mass in a single bin) keep the identity mapping,
    so constant images pass through unchanged.
    """
    arr = validate_gray(img)
    if not (0.0 < clip_limit <= 1.0):
        raise InvalidInputError(f"clip_limit must be in (0, 1], got {clip_limit}")
    tr, tc = tiles
    h, w = arr.shape
    if tr < 1 or tc < 1 or h < tr or w < tc:
        raise InvalidInputError(f"tile grid {tiles} does not fit image {w}x{h}")

    bins = np.minimum((arr * nbins).astype(int), nbins - 1)
    row_edges = _tile_edges(h, tr)
    col_edges = _tile_edges(w, tc)

    luts = np.zeros((tr, tc, nbins))
    identity = np.zeros((tr, tc), dtype=bool)
    centers_r = np.empty(tr)
    centers_c = np.empty(tc)
    for i in range(tr):
        centers_r[i] = (row_edges[i] + row_edges[i + 1] - 1) / 2.0
        for j in range(tc):
            centers_c[j] = (col_edges[j] + col_edges[j + 1] - 1) / 2.0
            tile = bins[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=nbins).astype(np.float64)
            area = tile.size
            if np.count_nonzero(hist) <= 1:
                identity[i, j] = True
                continue
            clipped = _clip_histogram(hist, clip_limit * area)
            cdf = np.cumsum(clipped)
            luts[i, j] = (cdf - 0.5 * clipped) / area

    # bilinear blend of the four surrounding tile mappings
    ys = np.arange(h)
    xs = np.arange(w)
    i1 = np.clip(np.searchsorted(centers_r, ys, side="right") - 1, 0, tr - 1)
    j1 = np.clip(np.searchsorted(centers_c, xs, side="right") - 1, 0, tc - 1)
    i2 = np.minimum(i1 + 1, tr - 1)
    j2 = np.minimum(j1 + 1, tc - 1)
    dy = np.where(i2 > i1, (ys - centers_r[i1]) / (centers_r[i2] - centers_r[i1] + 1e-300), 0.0)
    dx = np.where(j2 > j1, (xs - centers_c[j1]) / (centers_c[j2] - centers_c[j1] + 1e-300), 0.0)
    dy = np.clip(dy, 0.0, 1.0)[:, None]
    dx = np.clip(dx, 0.0, 1.0)[None, :]

    def mapped(ti, tj):
        ti2 = np.broadcast_to(ti[:, None], arr.shape)
        tj2 = np.broadcast_to(tj[None, :], arr.shape)
        vals = luts[ti2, tj2, bins]
        return np.where(identity[ti2, tj2], arr, vals)

    out = (
        (1 - dy) * (1 - dx) * mapped(i1, j1)
        + (1 - dy) * dx * mapped(i1, j2)
        + dy * (1 - dx) * mapped(i2, j1)
        + dy * dx * mapped(i2, j2)
    )
    return np.clip(out, 0.0, 1.0)


def mask_iris(roi: RoiImage, ann: EyeAnnotation | None = None) -> RoiImage:
    """Zero out all pixels inside the (ROI-space) iris circle."""
    circle = ann if ann is not None else roi.annotation
    icx, icy = circle.iris_center
    side = roi.side
    ys, xs = np.ogrid[:side, :side]
    inside = (xs - icx) ** 2 + (ys - icy) ** 2 <= circle.iris_radius ** 2
    masked = roi.image.copy()
    masked[inside] = 0.0
    return replace(roi, image=masked)


def mean_subtract(imgs: list[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]:
    """Subtract the pixel-wise mean of the set from each image.

    Residuals may be negative; only the neural feature path consumes them.
    Returns (residuals, mean) so the mean can be persisted for reuse.
    """
    if not imgs:
        raise InvalidInputError("mean_subtract requires at least one image")
    first = np.asarray(imgs[0], dtype=np.float64)
    stack = np.empty((len(imgs),) + first.shape)
    for k, im in enumerate(imgs):
        arr = np.asarray(im, dtype=np.float64)
        if arr.shape != first.shape:
            raise InvalidInputError(
                f"image {k} has shape {arr.shape}, expected {first.shape}"
            )
        stack[k] = arr
    mean = stack.mean(axis=0)
    residuals = [stack[k] - mean for k in range(len(imgs))]
    return residuals, mean


def save_mean_image(path: str | Path, mean: np.ndarray) -> None:
    """Persist a mean image: u32-LE width/height header + row-major f32-LE."""
    arr = np.asarray(mean, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"mean image must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(arr.astype("<f4").tobytes(order="C"))


def load_mean_image(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise InvalidInputError(f"truncated mean-image file: {path}")
        w, h = struct.unpack("<II", header)
        payload = f.read()
    expected = w * h * 4
    if len(payload) != expected:
        raise InvalidInputError(
            f"mean-image payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)
