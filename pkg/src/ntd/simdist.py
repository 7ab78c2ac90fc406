"""Similarity kernels between feature vectors.

All kernels accumulate in float64 regardless of the storage width of their
inputs, raise DegenerateMetricError on undefined cases instead of returning
NaN, and clamp the bounded metrics to [-1, 1] to absorb last-ulp float noise.
"""

from __future__ import annotations

import enum
from typing import Iterable

import numpy as np

from .errors import DegenerateMetricError, ValidationError

# Denominators smaller than this are treated as degenerate.
NEAR_ZERO = 1e-12


class Metric(enum.Enum):
    """Supported similarity metrics.

    TANIMOTO is the standard continuous form T = a.b / (|a|^2 + |b|^2 - a.b).
    TANIMOTO_PAPER keeps the square-root denominator variant
    T = a.b / (|a| + |b| - a.b) for fidelity; it is degenerate whenever
    |a| + |b| ~= a.b and is not the default anywhere.
    """

    COSINE = "cosine"
    PEARSON = "pearson"
    TANIMOTO = "tanimoto-standard"
    TANIMOTO_PAPER = "tanimoto-paper"

    @classmethod
    def parse(cls, name: str) -> "Metric":
        aliases = {"tanimoto": cls.TANIMOTO}
        for member in cls:
            aliases[member.value] = member
        try:
            return aliases[name.strip().lower()]
        except KeyError:
            raise ValidationError(
                f"unknown metric {name!r}; expected one of "
                f"{sorted(aliases)}"
            ) from None


def _as_pair(a: Iterable[float], b: Iterable[float]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValidationError("similarity operands must be 1-D vectors")
    if x.shape[0] != y.shape[0]:
        raise ValidationError(
            f"operand length mismatch: {x.shape[0]} vs {y.shape[0]}"
        )
    if x.shape[0] == 0:
        raise ValidationError("similarity operands must be non-empty")
    return x, y


def _clamp(value: float) -> float:
    return float(min(1.0, max(-1.0, value)))


def cosine(a: Iterable[float], b: Iterable[float]) -> float:
    """Cosine similarity a.b / (|a| |b|). Raises on a zero-norm operand."""
    x, y = _as_pair(a, b)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx < NEAR_ZERO or ny < NEAR_ZERO:
        raise DegenerateMetricError("cosine undefined for zero-norm operand")
    return _clamp(float(np.dot(x, y)) / (nx * ny))


def pearson(a: Iterable[float], b: Iterable[float]) -> float:
    """Pearson correlation, i.e. cosine of the mean-centered operands.

    Raises on operands shorter than 2 or with zero variance.
    """
    x, y = _as_pair(a, b)
    if x.shape[0] < 2:
        raise ValidationError("pearson requires vectors of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    nx = float(np.linalg.norm(xc))
    ny = float(np.linalg.norm(yc))
    if nx < NEAR_ZERO or ny < NEAR_ZERO:
        raise DegenerateMetricError("pearson undefined for constant operand")
    return _clamp(float(np.dot(xc, yc)) / (nx * ny))


def tanimoto(a: Iterable[float], b: Iterable[float], variant: str = "standard") -> float:
    """Tanimoto similarity in either the standard or the square-root variant.

    standard: a.b / (|a|^2 + |b|^2 - a.b), continuous for nonzero operands.
    paper:    a.b / (|a| + |b| - a.b), kept verbatim; degenerate denominators
              (|den| < 1e-12) raise instead of dividing.
    """
    x, y = _as_pair(a, b)
    dot = float(np.dot(x, y))
    if variant == "standard":
        den = float(np.dot(x, x)) + float(np.dot(y, y)) - dot
    elif variant == "paper":
        den = float(np.linalg.norm(x)) + float(np.linalg.norm(y)) - dot
    else:
        raise ValidationError(f"unknown tanimoto variant {variant!r}")
    if abs(den) < NEAR_ZERO:
        raise DegenerateMetricError(
            f"tanimoto-{variant} denominator {den!r} is degenerate"
        )
    value = dot / den
    return _clamp(value) if variant == "standard" else float(value)


def pairwise(metric: Metric, a: Iterable[float], b: Iterable[float]) -> float:
    """Similarity of one pair under the given metric."""
    if metric is Metric.COSINE:
        return cosine(a, b)
    if metric is Metric.PEARSON:
        return pearson(a, b)
    if metric is Metric.TANIMOTO:
        return tanimoto(a, b, "standard")
    if metric is Metric.TANIMOTO_PAPER:
        return tanimoto(a, b, "paper")
    raise ValidationError(f"unknown metric {metric!r}")


def mean_similarity(x: Iterable[float], members: np.ndarray, metric: Metric) -> float:
    """Arithmetic mean of pairwise(metric, x, m) over the rows of members.

    members is a (count, dim) array; an empty set raises, and any degenerate
    pair propagates its error.
    """
    rows = np.asarray(members, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1)
    if rows.shape[0] == 0:
        raise ValidationError("mean_similarity over an empty comparison set")
    total = 0.0
    for row in rows:
        total += pairwise(metric, x, row)
    return total / rows.shape[0]
