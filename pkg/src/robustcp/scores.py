"""Split conformal prediction on conformity scores.

Scores follow the "larger is more conforming" convention and live in
[0, 1].  A prediction set keeps every class whose score clears a
threshold calibrated on held-out data, so the calibration quantile is a
lower quantile: the k-th smallest calibration score with
k = floor(alpha * (n + 1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

__all__ = [
    "tps_score",
    "aps_score",
    "conformal_quantile",
    "inverse_quantile",
    "prediction_set",
    "evaluate_sets",
    "coverage_distribution",
    "PredictionSet",
    "MetricsReport",
    "CoverageBeta",
]

# Threshold emitted when the calibration set is too small for the asked
# miscoverage level (k = 0).  Every class clears it.
ALL_CLASSES_THRESHOLD = -math.inf


def _check_prob_vector(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 1 or probs.size < 2:
        raise ValueError("probability vector must be 1-d with at least 2 classes")
    if np.any(probs < -1e-9) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-6):
        raise ValueError("probabilities must be nonnegative and sum to 1")
    return probs


def _check_scores(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a nonempty 1-d array")
    if np.any(np.isnan(scores)):
        raise ValueError("scores contain NaN")
    return scores


def tps_score(probs: np.ndarray, label: int) -> float:
    """Probability assigned to ``label``: the true-class-probability score."""
    probs = _check_prob_vector(probs)
    return float(probs[label])


def aps_score(probs: np.ndarray, label: int, u: float) -> float:
    """Adaptive score: one minus the probability mass strictly above ``label``.

    The mass of classes ranked strictly above ``label`` plus a ``u``
    fraction of the label's own mass is subtracted from 1, which keeps
    the usual "cumulative mass down to the label" score on the
    larger-is-more-conforming scale.

    Parameters
    ----------
    probs : array of shape (n_classes,)
        Class probabilities, summing to 1.
    label : int
        Class whose conformity is scored.
    u : float
        Tie-break draw in [0, 1].  Randomizing it makes the score
        continuous; ``u = 1`` gives the conservative deterministic
        variant.

    Returns
    -------
    float
        Score in [0, 1].
    """
    probs = _check_prob_vector(probs)
    if not 0.0 <= u <= 1.0:
        raise ValueError("u must lie in [0, 1]")
    p_label = probs[label]
    mass_above = probs[probs > p_label].sum()
    return float(1.0 - mass_above - u * p_label)


def _order_index(alpha: float, n: int) -> int:
    """Order-statistic rank floor(alpha * (n + 1)), robust to grid round-off.

    Products like (k / (n+1)) * (n+1) can land a hair below the integer k
    in floating point; values within 1e-9 of an integer are snapped up so
    the quantile grid round-trips exactly.
    """
    x = alpha * (n + 1)
    k = math.floor(x)
    if k + 1 - x < 1e-9:
        k += 1
    return k


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """Calibration threshold: the floor(alpha * (n+1))-th smallest score.

    Parameters
    ----------
    scores : array of shape (n,)
        Calibration scores.
    alpha : float
        Target miscoverage in (0, 1).

    Returns
    -------
    float
        The threshold, or ``-inf`` when floor(alpha * (n+1)) == 0, in
        which case prediction sets contain every class.
    """
    scores = _check_scores(scores)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    n = scores.size
    k = _order_index(alpha, n)
    if k == 0:
        return ALL_CLASSES_THRESHOLD
    return float(np.sort(scores)[k - 1])


def inverse_quantile(threshold: float, scores: np.ndarray) -> float:
    """Smallest grid level tau with ``conformal_quantile(scores, tau) >= threshold``.

    The grid is {k / (n+1) : k = 0, ..., n+1}.  Returns 1.0 when even the
    largest score sits below ``threshold``.
    """
    scores = _check_scores(scores)
    if math.isinf(threshold) and threshold < 0:
        return 0.0
    ordered = np.sort(scores)
    n = ordered.size
    idx = int(np.searchsorted(ordered, threshold, side="left"))
    if idx == n:
        return 1.0
    return (idx + 1) / (n + 1)


@dataclass(frozen=True)
class PredictionSet:
    """Classes whose scores clear ``threshold``."""

    members: frozenset[int]
    threshold: float

    def __contains__(self, label: int) -> bool:
        return label in self.members

    def __len__(self) -> int:
        return len(self.members)


def prediction_set(class_scores: np.ndarray, threshold: float) -> PredictionSet:
    """Set of classes with score >= threshold (all classes at ``-inf``)."""
    class_scores = np.asarray(class_scores, dtype=float)
    if class_scores.ndim != 1 or class_scores.size == 0:
        raise ValueError("class_scores must be a nonempty 1-d array")
    members = frozenset(int(c) for c in np.nonzero(class_scores >= threshold)[0])
    return PredictionSet(members=members, threshold=threshold)


@dataclass(frozen=True)
class MetricsReport:
    """Summary statistics of a batch of prediction sets."""

    empirical_coverage: float
    average_set_size: float
    singleton_hit_ratio: float
    set_size_histogram: dict[int, int] = field(default_factory=dict)
    n_points: int = 0


def evaluate_sets(sets: list[PredictionSet], labels: np.ndarray) -> MetricsReport:
    """Coverage, average size, singleton hit ratio and size histogram.

    The singleton hit ratio is the fraction of points whose set is
    exactly the true label.
    """
    labels = np.asarray(labels)
    if len(sets) != labels.size:
        raise ValueError("sets and labels must have equal length")
    if len(sets) == 0:
        raise ValueError("cannot evaluate an empty batch")
    covered = 0
    singles = 0
    sizes: dict[int, int] = {}
    total = 0
    for ps, y in zip(sets, labels):
        size = len(ps)
        total += size
        sizes[size] = sizes.get(size, 0) + 1
        hit = int(y) in ps
        covered += hit
        singles += hit and size == 1
    n = len(sets)
    return MetricsReport(
        empirical_coverage=covered / n,
        average_set_size=total / n,
        singleton_hit_ratio=singles / n,
        set_size_histogram=dict(sorted(sizes.items())),
        n_points=n,
    )


@dataclass(frozen=True)
class CoverageBeta:
    """Distribution of coverage conditional on the calibration draw.

    With n calibration points and rank l = floor((n+1) * alpha), coverage
    of the split conformal set follows Beta(n + 1 - l, l).  When l == 0
    the threshold is ``-inf`` and coverage is the constant 1.
    """

    n: int
    alpha: float
    shape_a: float
    shape_b: float
    degenerate: bool

    @property
    def mean(self) -> float:
        if self.degenerate:
            return 1.0
        return self.shape_a / (self.shape_a + self.shape_b)

    def cdf(self, x: float) -> float:
        if self.degenerate:
            return 0.0 if x < 1.0 else 1.0
        return float(stats.beta.cdf(x, self.shape_a, self.shape_b))


def coverage_distribution(n: int, alpha: float) -> CoverageBeta:
    """Beta law of coverage for an n-point calibration set at level alpha."""
    if n < 1:
        raise ValueError("need at least one calibration point")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    l = _order_index(alpha, n)
    if l == 0:
        return CoverageBeta(n=n, alpha=alpha, shape_a=float(n + 1), shape_b=0.0, degenerate=True)
    return CoverageBeta(
        n=n, alpha=alpha, shape_a=float(n + 1 - l), shape_b=float(l), degenerate=False
    )
