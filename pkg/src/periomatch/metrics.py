"""Vector comparison functions with a uniform similarity polarity.

Every comparator emits "higher = more likely genuine": the Euclidean and
chi-square distances are negated at emission so downstream evaluation and
fusion never branch on score direction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .descriptors import FeatureVector
from .errors import InvalidInputError

CHI2_DENOM_GUARD = 1e-12
COSINE_NORM_GUARD = 1e-12

METRIC_IDS = ("euclidean", "chi2", "cosine")


@dataclass(frozen=True)
class Score:
    value: float
    comparator_id: str
    polarity: str = "similarity"


def _as_vector(v) -> np.ndarray:
    if isinstance(v, FeatureVector):
        return v.values
    return np.asarray(v, dtype=np.float64).ravel()


def _check_lengths(a: np.ndarray, b: np.ndarray) -> None:
    if a.size != b.size:
        raise InvalidInputError(f"vector length mismatch: {a.size} vs {b.size}")


def euclidean(a, b) -> Score:
    """Negated Euclidean distance."""
    x, y = _as_vector(a), _as_vector(b)
    _check_lengths(x, y)
    d = x - y
    return Score(-math.sqrt(float(np.dot(d, d))), comparator_id="euclidean")


def chi2(a, b) -> Score:
    """Negated chi-square histogram distance.

    Requires non-negative entries; terms whose denominator falls below the
    guard contribute nothing (degenerate all-zero histogram blocks).
    """
    x, y = _as_vector(a), _as_vector(b)
    _check_lengths(x, y)
    if x.size and (x.min() < 0.0 or y.min() < 0.0):
        raise InvalidInputError("chi2 requires non-negative entries")
    denom = x + y
    num = (x - y) ** 2
    ok = denom >= CHI2_DENOM_GUARD
    total = float(np.sum(num[ok] / denom[ok]))
    return Score(-total, comparator_id="chi2")


def cosine(a, b) -> Score:
    """Cosine similarity in [-1, 1]; zero-norm inputs score 0."""
    x, y = _as_vector(a), _as_vector(b)
    _check_lengths(x, y)
    nx = math.sqrt(float(np.dot(x, x)))
    ny = math.sqrt(float(np.dot(y, y)))
    if nx < COSINE_NORM_GUARD or ny < COSINE_NORM_GUARD:
        return Score(0.0, comparator_id="cosine")
    value = float(np.dot(x, y)) / (nx * ny)
    return Score(max(-1.0, min(1.0, value)), comparator_id="cosine")


_METRICS = {"euclidean": euclidean, "chi2": chi2, "cosine": cosine}


def get_metric(metric_id: str):
    """Look up a comparator by its CLI/config id."""
    try:
        return _METRICS[metric_id]
    except KeyError:
        raise InvalidInputError(
            f"unknown metric {metric_id!r}; expected one of {sorted(_METRICS)}"
        ) from None
