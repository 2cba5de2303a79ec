"""SIFT keypoints, 128-d descriptors, and constrained pair matching.

Difference-of-Gaussians extrema over a 4-octave scale-space pyramid,
sub-pixel refinement, dominant-orientation assignment, and 4x4x8 gradient
histograms.  The comparison score between two images is the number of
keypoint pairs that survive the ratio test plus angle/displacement
consistency filtering.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidInputError
from .preprocess import validate_gray

NUM_OCTAVES = 4
SCALES_PER_OCTAVE = 3
BASE_SIGMA = 1.6
ASSUMED_INPUT_SIGMA = 0.5
CONTRAST_THRESHOLD = 0.03
EDGE_RATIO = 10.0
IMAGE_BORDER = 5
MIN_IMAGE_SIDE = 32

ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
ORI_SIGMA_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0

DESCR_WIDTH = 4
DESCR_BINS = 8
DESCR_CELL_FACTOR = 3.0
DESCR_CLIP = 0.2
DESCRIPTOR_LENGTH = DESCR_WIDTH * DESCR_WIDTH * DESCR_BINS

MATCH_RATIO = 0.8
MATCH_ANGLE_TOLERANCE_DEG = 20.0
MATCH_DISPLACEMENT_FRACTION = 0.15
_ANGLE_HIST_BINS = 36


@dataclass
class Keypoint:
    """Scale-space keypoint in original-image pixel coordinates."""

    x: float
    y: float
    scale: float
    orientation: float  # radians in [0, 2*pi)
    response: float
    descriptor: np.ndarray

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float64).ravel()
        if self.descriptor.size != DESCRIPTOR_LENGTH:
            raise InvalidInputError(
                f"descriptor length {self.descriptor.size}, expected {DESCRIPTOR_LENGTH}"
            )


@dataclass
class MatchSet:
    """One-to-one keypoint pairing; score is the surviving pair count."""

    pairs: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def score(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# Scale-space construction


def _gaussian_pyramid(img: np.ndarray) -> list[list[np.ndarray]]:
    n_images = SCALES_PER_OCTAVE + 3
    k = 2.0 ** (1.0 / SCALES_PER_OCTAVE)
    sigmas = [BASE_SIGMA * k ** i for i in range(n_images)]
    increments = [math.sqrt(max(sigmas[i] ** 2 - sigmas[i - 1] ** 2, 1e-12))
                  for i in range(1, n_images)]

    base_blur = math.sqrt(max(BASE_SIGMA ** 2 - ASSUMED_INPUT_SIGMA ** 2, 0.01))
    current = gaussian_filter(img, base_blur, mode="nearest")

    pyramid = []
    for _ in range(NUM_OCTAVES):
        octave = [current]
        for inc in increments:
            octave.append(gaussian_filter(octave[-1], inc, mode="nearest"))
        pyramid.append(octave)
        nxt = octave[SCALES_PER_OCTAVE][::2, ::2]
        if min(nxt.shape) < 2 * IMAGE_BORDER + 3:
            break
        current = nxt
    return pyramid


def _dog_pyramid(gauss: list[list[np.ndarray]]) -> list[list[np.ndarray]]:
    return [[octave[i + 1] - octave[i] for i in range(len(octave) - 1)]
            for octave in gauss]


def _extrema_candidates(d0: np.ndarray, d1: np.ndarray, d2: np.ndarray,
                        prefilter: float) -> np.ndarray:
    """(N, 2) interior pixel indices that are 26-neighborhood extrema of d1."""
    h, w = d1.shape
    b = IMAGE_BORDER
    if h <= 2 * b or w <= 2 * b:
        return np.empty((0, 2), dtype=int)
    center = d1[b:-b, b:-b]
    strong = np.abs(center) >= prefilter
    if not strong.any():
        return np.empty((0, 2), dtype=int)

    is_max = np.ones_like(strong)
    is_min = np.ones_like(strong)
    for layer in (d0, d1, d2):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if layer is d1 and dy == 0 and dx == 0:
                    continue
                nb = layer[b + dy:h - b + dy, b + dx:w - b + dx]
                is_max &= center >= nb
                is_min &= center <= nb
    mask = strong & (is_max | is_min)
    ij = np.argwhere(mask)
    ij += b
    return ij


def _refine_extremum(dog_octave: list[np.ndarray], i: int, j: int, s: int):
    """Quadratic sub-pixel fit; returns (i, j, s, offset, value) or None."""
    h, w = dog_octave[0].shape
    for _ in range(5):
        prev_l, cur, next_l = dog_octave[s - 1], dog_octave[s], dog_octave[s + 1]
        dx = 0.5 * (cur[i, j + 1] - cur[i, j - 1])
        dy = 0.5 * (cur[i + 1, j] - cur[i - 1, j])
        ds = 0.5 * (next_l[i, j] - prev_l[i, j])
        dxx = cur[i, j + 1] - 2 * cur[i, j] + cur[i, j - 1]
        dyy = cur[i + 1, j] - 2 * cur[i, j] + cur[i - 1, j]
        dss = next_l[i, j] - 2 * cur[i, j] + prev_l[i, j]
        dxy = 0.25 * (cur[i + 1, j + 1] - cur[i + 1, j - 1]
                      - cur[i - 1, j + 1] + cur[i - 1, j - 1])
        dxs = 0.25 * (next_l[i, j + 1] - next_l[i, j - 1]
                      - prev_l[i, j + 1] + prev_l[i, j - 1])
        dys = 0.25 * (next_l[i + 1, j] - next_l[i - 1, j]
                      - prev_l[i + 1, j] + prev_l[i - 1, j])
        grad = np.array([dx, dy, ds])
        hess = np.array([[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]])
        try:
            offset = -np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        if np.all(np.abs(offset) < 0.5):
            value = cur[i, j] + 0.5 * float(np.dot(grad, offset))
            return i, j, s, offset, value, (dxx, dyy, dxy)
        j += int(round(offset[0]))
        i += int(round(offset[1]))
        s += int(round(offset[2]))
        if (s < 1 or s > SCALES_PER_OCTAVE
                or i < IMAGE_BORDER or i >= h - IMAGE_BORDER
                or j < IMAGE_BORDER or j >= w - IMAGE_BORDER):
            return None
    return None


def _passes_edge_test(dxx: float, dyy: float, dxy: float, edge_ratio: float) -> bool:
    tr = dxx + dyy
    det = dxx * dyy - dxy * dxy
    if det <= 0:
        return False
    return edge_ratio * tr * tr < (edge_ratio + 1.0) ** 2 * det


# ---------------------------------------------------------------------------
# Orientation and descriptor


def _orientation_angles(gauss_img: np.ndarray, i: int, j: int, sigma: float) -> list[tuple[float, float]]:
    """Dominant gradient orientations around (i, j): list of (angle, peak)."""
    h, w = gauss_img.shape
    weight_sigma = ORI_SIGMA_FACTOR * sigma
    radius = max(1, int(round(ORI_RADIUS_FACTOR * weight_sigma)))
    hist = np.zeros(ORI_BINS)
    denom = -0.5 / (weight_sigma ** 2)
    for di in range(-radius, radius + 1):
        y = i + di
        if y <= 0 or y >= h - 1:
            continue
        for dj in range(-radius, radius + 1):
            x = j + dj
            if x <= 0 or x >= w - 1:
                continue
            gx = gauss_img[y, x + 1] - gauss_img[y, x - 1]
            gy = gauss_img[y + 1, x] - gauss_img[y - 1, x]
            mag = math.hypot(gx, gy)
            angle = math.atan2(gy, gx) % (2.0 * math.pi)
            weight = math.exp(denom * (di * di + dj * dj))
            b = int(angle / (2.0 * math.pi) * ORI_BINS) % ORI_BINS
            hist[b] += weight * mag

    smooth = np.empty_like(hist)
    for b in range(ORI_BINS):
        smooth[b] = (6 * hist[b]
                     + 4 * (hist[b - 1] + hist[(b + 1) % ORI_BINS])
                     + hist[b - 2] + hist[(b + 2) % ORI_BINS]) / 16.0
    peak_floor = ORI_PEAK_RATIO * smooth.max()
    if smooth.max() <= 0:
        return []

    angles = []
    for b in range(ORI_BINS):
        left = smooth[b - 1]
        right = smooth[(b + 1) % ORI_BINS]
        if smooth[b] > left and smooth[b] > right and smooth[b] >= peak_floor:
            interp = (b + 0.5 * (left - right) / (left - 2 * smooth[b] + right)) % ORI_BINS
            angle = interp * 2.0 * math.pi / ORI_BINS
            angles.append((angle % (2.0 * math.pi), float(smooth[b])))
    return angles


def _descriptor(gauss_img: np.ndarray, y: float, x: float, sigma: float,
                orientation: float) -> np.ndarray:
    h, w = gauss_img.shape
    d = DESCR_WIDTH
    cell = DESCR_CELL_FACTOR * sigma
    radius = int(round(cell * math.sqrt(2) * (d + 1) * 0.5))
    radius = min(radius, int(math.hypot(h, w)))
    cos_t = math.cos(orientation)
    sin_t = math.sin(orientation)
    weight_denom = -2.0 * (0.5 * d * cell) ** 2

    hist = np.zeros((d + 2, d + 2, DESCR_BINS))
    yc, xc = int(round(y)), int(round(x))
    for di in range(-radius, radius + 1):
        py = yc + di
        if py <= 0 or py >= h - 1:
            continue
        for dj in range(-radius, radius + 1):
            px = xc + dj
            if px <= 0 or px >= w - 1:
                continue
            # rotate the offset into the keypoint frame
            u = cos_t * dj + sin_t * di
            v = -sin_t * dj + cos_t * di
            row_bin = v / cell + 0.5 * d - 0.5
            col_bin = u / cell + 0.5 * d - 0.5
            if row_bin <= -1 or row_bin >= d or col_bin <= -1 or col_bin >= d:
                continue
            gx = gauss_img[py, px + 1] - gauss_img[py, px - 1]
            gy = gauss_img[py + 1, px] - gauss_img[py - 1, px]
            mag = math.hypot(gx, gy)
            if mag == 0.0:
                continue
            angle = (math.atan2(gy, gx) - orientation) % (2.0 * math.pi)
            obin = angle / (2.0 * math.pi) * DESCR_BINS
            weight = math.exp((u * u + v * v) / weight_denom)

            r0 = int(math.floor(row_bin))
            c0 = int(math.floor(col_bin))
            o0 = int(math.floor(obin))
            rf, cf, of = row_bin - r0, col_bin - c0, obin - o0
            contrib = weight * mag
            for (rr, wr) in ((r0, 1 - rf), (r0 + 1, rf)):
                if rr < -1 or rr > d:
                    continue
                for (cc, wc) in ((c0, 1 - cf), (c0 + 1, cf)):
                    if cc < -1 or cc > d:
                        continue
                    for (oo, wo) in ((o0, 1 - of), (o0 + 1, of)):
                        hist[rr + 1, cc + 1, oo % DESCR_BINS] += contrib * wr * wc * wo

    vec = hist[1:-1, 1:-1, :].ravel()
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec = vec / norm
        vec = np.minimum(vec, DESCR_CLIP)
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
    return vec


def detect_keypoints(
    img: np.ndarray,
    contrast_threshold: float = CONTRAST_THRESHOLD,
    edge_ratio: float = EDGE_RATIO,
) -> list[Keypoint]:
    """Detect DoG keypoints with orientations and descriptors.

    The pyramid has 4 octaves (fewer if the image runs out of pixels) with
    3 scales per octave and base sigma 1.6.  Refined extrema are kept when
    |D| >= contrast_threshold and the principal-curvature ratio passes the
    edge test; every orientation peak >= 80% of the maximum spawns its own
    keypoint.
    """
    arr = validate_gray(img)
    h, w = arr.shape
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise InvalidInputError(f"image {w}x{h} too small for SIFT (min {MIN_IMAGE_SIDE})")

    gauss = _gaussian_pyramid(arr)
    dogs = _dog_pyramid(gauss)
    prefilter = 0.5 * contrast_threshold

    keypoints: list[Keypoint] = []
    seen: set[tuple] = set()
    for octave_idx, dog_octave in enumerate(dogs):
        for s in range(1, SCALES_PER_OCTAVE + 1):
            cands = _extrema_candidates(dog_octave[s - 1], dog_octave[s],
                                        dog_octave[s + 1], prefilter)
            for i, j in cands:
                refined = _refine_extremum(dog_octave, int(i), int(j), s)
                if refined is None:
                    continue
                ri, rj, rs, offset, value, hess2 = refined
                if abs(value) < contrast_threshold:
                    continue
                if not _passes_edge_test(*hess2, edge_ratio):
                    continue
                octave_scale = 2.0 ** octave_idx
                x = (rj + offset[0]) * octave_scale
                y = (ri + offset[1]) * octave_scale
                sigma_local = BASE_SIGMA * 2.0 ** ((rs + offset[2]) / SCALES_PER_OCTAVE)
                layer = min(max(int(round(rs + offset[2])), 0), len(gauss[octave_idx]) - 1)
                gauss_img = gauss[octave_idx][layer]
                for angle, peak in _orientation_angles(gauss_img, ri, rj, sigma_local):
                    key = (round(x, 2), round(y, 2),
                           round(sigma_local * octave_scale, 2), round(angle, 3))
                    if key in seen:
                        continue
                    seen.add(key)
                    desc = _descriptor(gauss_img, ri + offset[1], rj + offset[0],
                                       sigma_local, angle)
                    keypoints.append(Keypoint(
                        x=float(x), y=float(y),
                        scale=float(sigma_local * octave_scale),
                        orientation=float(angle),
                        response=float(abs(value)),
                        descriptor=desc,
                    ))
    keypoints.sort(key=lambda kp: (kp.y, kp.x, kp.scale, kp.orientation))
    return keypoints


# ---------------------------------------------------------------------------
# Constrained matching


def _ratio_test_candidates(enrol: list[Keypoint], probe: list[Keypoint],
                           ratio: float) -> list[tuple[int, int, float]]:
    e_mat = np.stack([kp.descriptor for kp in enrol])
    p_mat = np.stack([kp.descriptor for kp in probe])
    # squared distances via the expansion trick, clamped for safety
    sq = (np.sum(e_mat ** 2, axis=1)[:, None]
          + np.sum(p_mat ** 2, axis=1)[None, :]
          - 2.0 * e_mat @ p_mat.T)
    dist = np.sqrt(np.maximum(sq, 0.0))
    candidates = []
    for i in range(dist.shape[0]):
        row = dist[i]
        if row.size == 1:
            candidates.append((i, 0, float(row[0])))
            continue
        order = np.argsort(row, kind="stable")
        j, j2 = int(order[0]), int(order[1])
        d1, d2 = float(row[j]), float(row[j2])
        if d1 < ratio * d2:
            candidates.append((i, j, d1))
    return candidates


def _greedy_one_to_one(candidates: list[tuple[int, int, float]]) -> list[tuple[int, int, float]]:
    used_e: set[int] = set()
    used_p: set[int] = set()
    pairs = []
    for i, j, d in sorted(candidates, key=lambda c: (c[2], c[0], c[1])):
        if i in used_e or j in used_p:
            continue
        used_e.add(i)
        used_p.add(j)
        pairs.append((i, j, d))
    return pairs


def _angle_filter(pairs, enrol, probe, tolerance_rad: float):
    if not pairs:
        return pairs
    deltas = np.array([(probe[j].orientation - enrol[i].orientation) % (2.0 * math.pi)
                       for i, j, _ in pairs])
    bins = (deltas / (2.0 * math.pi) * _ANGLE_HIST_BINS).astype(int) % _ANGLE_HIST_BINS
    hist = np.bincount(bins, minlength=_ANGLE_HIST_BINS)
    modal = (int(np.argmax(hist)) + 0.5) * 2.0 * math.pi / _ANGLE_HIST_BINS
    circ = np.abs((deltas - modal + math.pi) % (2.0 * math.pi) - math.pi)
    return [p for p, c in zip(pairs, circ) if c <= tolerance_rad]


def _displacement_filter(pairs, enrol, probe, fraction: float, diagonal: float):
    if not pairs:
        return pairs
    disp = np.array([(probe[j].x - enrol[i].x, probe[j].y - enrol[i].y)
                     for i, j, _ in pairs])
    median = np.median(disp, axis=0)
    dev = np.hypot(disp[:, 0] - median[0], disp[:, 1] - median[1])
    return [p for p, d in zip(pairs, dev) if d <= fraction * diagonal]


def _extent_diagonal(enrol: list[Keypoint], probe: list[Keypoint]) -> float:
    xs = [kp.x for kp in enrol] + [kp.x for kp in probe]
    ys = [kp.y for kp in enrol] + [kp.y for kp in probe]
    return math.hypot(max(xs) - min(xs), max(ys) - min(ys))


def match_constrained(
    enrol: list[Keypoint],
    probe: list[Keypoint],
    ratio: float = MATCH_RATIO,
    angle_tolerance_deg: float = MATCH_ANGLE_TOLERANCE_DEG,
    displacement_fraction: float = MATCH_DISPLACEMENT_FRACTION,
    image_diagonal: float | None = None,
) -> MatchSet:
    """Pair keypoints and drop geometrically inconsistent matches.

    Stage 1: nearest-neighbor descriptor pairing under the ratio test with
    greedy one-to-one assignment.  Stage 2: keep pairs whose orientation
    difference lies within the tolerance of the modal difference.  Stage 3:
    keep pairs whose displacement deviates from the median displacement by
    at most `displacement_fraction` of the image diagonal (estimated from
    the keypoint extent when not supplied).
    """
    if not enrol or not probe:
        return MatchSet()
    candidates = _ratio_test_candidates(enrol, probe, ratio)
    pairs = _greedy_one_to_one(candidates)
    pairs = _angle_filter(pairs, enrol, probe, math.radians(angle_tolerance_deg))
    if pairs:
        diag = image_diagonal if image_diagonal is not None else _extent_diagonal(enrol, probe)
        if diag > 0:
            pairs = _displacement_filter(pairs, enrol, probe, displacement_fraction, diag)
    return MatchSet(pairs=pairs)


def match_score(enrol: list[Keypoint], probe: list[Keypoint], **kwargs) -> int:
    return match_constrained(enrol, probe, **kwargs).score


# ---------------------------------------------------------------------------
# Serialization: JSON lines, one keypoint per line


def save_keypoints(path: str | Path, keypoints: list[Keypoint]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for kp in keypoints:
            f.write(json.dumps({
                "x": kp.x, "y": kp.y, "scale": kp.scale,
                "orientation": kp.orientation,
                "response": kp.response,
                "descriptor": [float(v) for v in kp.descriptor],
            }) + "\n")


def load_keypoints(path: str | Path) -> list[Keypoint]:
    keypoints = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{line_no}: bad keypoint record: {exc}") from exc
            keypoints.append(Keypoint(
                x=rec["x"], y=rec["y"], scale=rec["scale"],
                orientation=rec["orientation"],
                response=rec.get("response", 0.0),
                descriptor=np.asarray(rec["descriptor"], dtype=np.float64),
            ))
    return keypoints
