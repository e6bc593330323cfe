"""Conformal prediction with certified robustness to test-time evasion.

Calibration always happens on clean data; the adversary perturbs test
inputs inside a threat-model ball.  Robustness can be bought at either
end:

* test-time: keep the clean threshold and replace each test score by a
  certified upper bound computed at the observed (possibly perturbed)
  input;
* calibration-time: replace each calibration score by a certified lower
  bound, deflating the threshold once, and score test points with plain
  smooth means.

Both variants accept a mean-only or a binned-CDF bound.  Corrected
variants additionally account for Monte-Carlo estimation error and give
finite-sample guarantees at a declared failure budget.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounds import ThreatModel, bound_for_clean, bound_for_observed
from .correction import BudgetLedger, bernstein_radius, corrected_bound, hoeffding_radius
from .errors import ConfigurationError
from .scores import PredictionSet, conformal_quantile, inverse_quantile, prediction_set
from .smoothing import (
    BinGrid,
    ScoreDistribution,
    SmoothingScheme,
    estimate_distribution,
    substream,
)

__all__ = [
    "EvasionConfig",
    "CalibrationTable",
    "ClassScoreOracle",
    "calibrate_smooth",
    "class_distributions",
    "sets_from_distributions",
    "mean_set_from_distributions",
    "lower_bounds_for",
    "test_time_sets",
    "calibration_time_threshold",
    "smooth_mean_set",
    "vanilla_worst_case_coverage",
    "corrected_calibrate",
    "corrected_test_set",
    "corrected_set_from_distributions",
    "test_time_corrected_sets",
]

# Batch oracle for one class: (points, class_index, rng) -> scores in [0, 1].
from typing import Callable

ClassScoreOracle = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class EvasionConfig:
    """What to smooth with, what to defend against, and how to bound.

    ``mode`` selects where conservatism is applied ("test-time" or
    "calibration-time"); ``bound_kind`` selects the mean-only or the
    binned-CDF certificate; ``eta`` > 0 switches on the finite-sample
    correction with that failure budget.
    """

    scheme: SmoothingScheme
    model: ThreatModel
    mode: str = "calibration-time"
    bound_kind: str = "cdf"
    n_samples: int = 10_000
    grid: BinGrid = field(default_factory=BinGrid.uniform)
    eta: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("test-time", "calibration-time"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.bound_kind not in ("mean", "cdf"):
            raise ConfigurationError(f"unknown bound kind {self.bound_kind!r}")
        if self.n_samples < 2:
            raise ConfigurationError("n_samples must be at least 2")
        if self.eta < 0.0 or self.eta >= 1.0:
            raise ConfigurationError("eta must lie in [0, 1)")


@dataclass
class CalibrationTable:
    """Per-calibration-point smooth-score summaries and certified bounds."""

    point_ids: np.ndarray
    smooth_means: np.ndarray
    lower_bounds: np.ndarray
    distributions: list[ScoreDistribution]
    corrected_lower_bounds: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.distributions)


def _estimate_for_class(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    class_index: int,
    config: EvasionConfig,
    rng: np.random.Generator,
) -> ScoreDistribution:
    return estimate_distribution(
        lambda pts, gen: oracle(pts, class_index, gen),
        x,
        config.scheme,
        config.n_samples,
        config.grid,
        rng,
    )


def calibrate_smooth(
    oracle: ClassScoreOracle,
    inputs: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    config: EvasionConfig,
    seed: int,
    point_ids: np.ndarray | None = None,
) -> tuple[CalibrationTable, float]:
    """Estimate true-label smooth scores on clean calibration data.

    Returns the calibration table (distributions, means, certified lower
    bounds over the forward ball around each clean point) and the plain
    conformal threshold of the smooth means.

    Randomness is keyed by (seed, point id, class), never by array
    position, so permuting the calibration set permutes the table.
    """
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=int)
    if inputs.shape[0] != labels.size:
        raise ValueError("inputs and labels must have equal length")
    if point_ids is None:
        point_ids = np.arange(labels.size)
    point_ids = np.asarray(point_ids, dtype=int)
    dists: list[ScoreDistribution] = []
    lower = np.empty(labels.size)
    for i in range(labels.size):
        rng = substream(seed, "cal", int(point_ids[i]), int(labels[i]))
        d = _estimate_for_class(oracle, inputs[i], int(labels[i]), config, rng)
        dists.append(d)
        lower[i] = bound_for_clean(
            d, config.model, config.scheme, "lower", config.bound_kind
        )
    means = np.array([d.mean for d in dists])
    table = CalibrationTable(
        point_ids=point_ids,
        smooth_means=means,
        lower_bounds=lower,
        distributions=dists,
    )
    return table, conformal_quantile(means, alpha)


def class_distributions(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    n_classes: int,
    config: EvasionConfig,
    seed: int,
    point_id: int,
) -> list[ScoreDistribution]:
    """Estimate one smooth-score distribution per class at a test input.

    Splitting estimation from bounding lets callers reuse the same
    Monte-Carlo draws across several threat radii or bound kinds.
    """
    return [
        _estimate_for_class(
            oracle, x, c, config, substream(seed, "test", int(point_id), c)
        )
        for c in range(n_classes)
    ]


def sets_from_distributions(
    distributions: list[ScoreDistribution],
    threshold: float,
    config: EvasionConfig,
) -> PredictionSet:
    """Conservative set from precomputed per-class distributions."""
    upper = np.array(
        [
            bound_for_observed(d, config.model, config.scheme, "upper", config.bound_kind)
            for d in distributions
        ]
    )
    return prediction_set(upper, threshold)


def mean_set_from_distributions(
    distributions: list[ScoreDistribution], threshold: float
) -> PredictionSet:
    """Plain smooth-mean set from precomputed per-class distributions."""
    return prediction_set(np.array([d.mean for d in distributions]), threshold)


def lower_bounds_for(table: CalibrationTable, config: EvasionConfig) -> np.ndarray:
    """Certified lower bounds of a calibration table under another config.

    Recomputes from the stored distributions, so one calibration pass can
    serve several radii or bound kinds.
    """
    return np.array(
        [
            bound_for_clean(d, config.model, config.scheme, "lower", config.bound_kind)
            for d in table.distributions
        ]
    )


def test_time_sets(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    n_classes: int,
    threshold: float,
    config: EvasionConfig,
    seed: int,
    point_id: int,
) -> PredictionSet:
    """Conservative set at an observed input: certified upper bounds vs threshold.

    The upper bound is taken over the reversed ball around the
    observation, so it covers the clean input wherever the true
    perturbation inside the threat model was.
    """
    dists = class_distributions(oracle, x, n_classes, config, seed, point_id)
    return sets_from_distributions(dists, threshold, config)


def calibration_time_threshold(table: CalibrationTable, alpha: float) -> float:
    """Deflated threshold: the conformal quantile of certified lower bounds."""
    return conformal_quantile(table.lower_bounds, alpha)


def smooth_mean_set(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    n_classes: int,
    threshold: float,
    config: EvasionConfig,
    seed: int,
    point_id: int,
) -> PredictionSet:
    """Plain smooth-mean set, used with vanilla and calibration-time thresholds."""
    dists = class_distributions(oracle, x, n_classes, config, seed, point_id)
    return mean_set_from_distributions(dists, threshold)


def vanilla_worst_case_coverage(
    table: CalibrationTable,
    threshold: float,
    lower_bounds: np.ndarray | None = None,
) -> float:
    """Coverage floor of the unprotected pipeline under worst-case evasion.

    Evaluates where the clean threshold would land among the certified
    lower bounds: if every test score can be pushed down to its bound,
    coverage cannot fall below 1 minus that grid level.  Pass
    ``lower_bounds`` (see :func:`lower_bounds_for`) to evaluate the same
    table under a different radius or bound kind.
    """
    if lower_bounds is None:
        lower_bounds = table.lower_bounds
    return 1.0 - inverse_quantile(threshold, lower_bounds)


# ------------------------------------------------------- corrected variants --


def corrected_calibrate(
    oracle: ClassScoreOracle,
    inputs: np.ndarray,
    labels: np.ndarray,
    alpha: float,
    config: EvasionConfig,
    seed: int,
    point_ids: np.ndarray | None = None,
) -> tuple[CalibrationTable, float, BudgetLedger]:
    """Calibration-time pipeline with finite-sample corrected lower bounds.

    Each calibration point's binned CDF is widened by a DKW band at
    eta / (2 n) before taking the lower bound, and the threshold is the
    quantile at level alpha - eta, leaving eta / 2 of the failure budget
    for the test side (see :func:`corrected_test_set`).
    """
    eta = config.eta
    if not eta > 0.0:
        raise ConfigurationError("corrected calibration requires eta > 0")
    if not alpha > eta:
        raise ConfigurationError("alpha must exceed the correction budget eta")
    table, _ = calibrate_smooth(oracle, inputs, labels, alpha, config, seed, point_ids)
    n = len(table)
    ledger = BudgetLedger(eta=eta)
    per_point = eta / (2.0 * n)
    corrected = np.empty(n)
    for i, d in enumerate(table.distributions):
        ledger.spend(f"calibration cdf band {int(table.point_ids[i])}", per_point)
        corrected[i] = corrected_bound(
            d, config.model, config.scheme, "lower", config.bound_kind, per_point,
            observed=False,
        )
    table.corrected_lower_bounds = corrected
    threshold = conformal_quantile(corrected, alpha - eta)
    return table, threshold, ledger


def corrected_test_set(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    n_classes: int,
    threshold: float,
    config: EvasionConfig,
    seed: int,
    point_id: int,
    ledger: BudgetLedger | None = None,
) -> PredictionSet:
    """Test side of the corrected calibration-time pipeline.

    Scores each class by its Monte-Carlo mean plus an empirical
    Bernstein radius at eta / (2 n_classes), so the true smooth score of
    the (unknown) true class clears the threshold whenever its bound
    would.
    """
    eta = config.eta
    if not eta > 0.0:
        raise ConfigurationError("corrected prediction requires eta > 0")
    dists = class_distributions(oracle, x, n_classes, config, seed, point_id)
    return corrected_set_from_distributions(dists, threshold, eta, ledger, point_id)


def corrected_set_from_distributions(
    distributions: list[ScoreDistribution],
    threshold: float,
    eta: float,
    ledger: BudgetLedger | None = None,
    point_id: int = 0,
) -> PredictionSet:
    """Corrected calibration-time set from precomputed distributions."""
    n_classes = len(distributions)
    per_class = eta / (2.0 * n_classes)
    inflated = np.empty(n_classes)
    for c, d in enumerate(distributions):
        if ledger is not None:
            ledger.spend(f"test point {int(point_id)} class {c} mean radius", per_class)
        inflated[c] = d.mean + bernstein_radius(d.n_samples, d.variance, per_class)
    return prediction_set(inflated, threshold)


def test_time_corrected_sets(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    n_classes: int,
    threshold: float,
    config: EvasionConfig,
    seed: int,
    point_id: int,
    eta_mc: float,
    eta_bound: float,
) -> PredictionSet:
    """Corrected variant of the test-time mode.

    The threshold must come from plain Monte-Carlo calibration run at
    level alpha - eta_mc - eta_bound; each class's certified upper bound
    is taken on statistics widened at ``eta_bound`` and inflated by a
    Hoeffding radius at ``eta_mc`` for the calibration-side Monte-Carlo
    error, restoring a 1 - alpha guarantee overall.
    """
    if eta_mc <= 0.0 or eta_bound <= 0.0:
        raise ConfigurationError("both correction budgets must be positive")
    eps_mc = hoeffding_radius(config.n_samples, eta_mc)
    dists = class_distributions(oracle, x, n_classes, config, seed, point_id)
    upper = np.array(
        [
            corrected_bound(
                d, config.model, config.scheme, "upper", config.bound_kind,
                eta_bound, observed=True,
            )
            + eps_mc
            for d in dists
        ]
    )
    return prediction_set(upper, threshold)
