"""Conformal prediction sets that stay valid under evasion and poisoning.

The package wraps a plain split-conformal pipeline (``scores``) with
randomized-smoothing machinery (``smoothing``, ``bounds``) so that the
calibrated threshold, or the prediction sets themselves, carry a
worst-case guarantee against bounded input perturbations.  Finite-sample
estimation error is handled by ``correction``, training-set attacks by
``poisoning``, and everything is wired together by the experiment
harness in ``experiments`` plus the ``robustcp`` command line tool.
"""

from .bounds import (
    BinaryBall,
    L2Ball,
    RegionTable,
    bound_for_clean,
    bound_for_observed,
    build_region_table,
    gaussian_cdf_lower,
    gaussian_cdf_upper,
    gaussian_mean_lower,
    gaussian_mean_upper,
    sparse_cdf_lower,
    sparse_cdf_upper,
    sparse_mean_lower,
    sparse_mean_upper,
)
from .correction import (
    BudgetLedger,
    CorrectedDistribution,
    bernstein_radius,
    corrected_bound,
    corrected_distribution,
    dkw_radius,
    hoeffding_radius,
)
from .errors import ConfigurationError, InputError
from .evasion import (
    CalibrationTable,
    EvasionConfig,
    calibrate_smooth,
    calibration_time_threshold,
    corrected_calibrate,
    corrected_test_set,
    smooth_mean_set,
    test_time_corrected_sets,
    test_time_sets,
    vanilla_worst_case_coverage,
)
from .poisoning import (
    ConservativeThreshold,
    PoisonWitness,
    corrected_feature_poison_threshold,
    feature_poison_threshold,
    label_poison_threshold,
    replay_feature_witness,
    replay_label_witness,
    worst_case_feature_quantile,
    worst_case_label_quantile,
)
from .scores import (
    ALL_CLASSES_THRESHOLD,
    CoverageBeta,
    MetricsReport,
    PredictionSet,
    aps_score,
    conformal_quantile,
    coverage_distribution,
    evaluate_sets,
    inverse_quantile,
    prediction_set,
    tps_score,
)
from .smoothing import (
    BinGrid,
    GaussianNoise,
    ScoreDistribution,
    SparseFlipNoise,
    distribution_from_samples,
    estimate_distribution,
    sample_gaussian,
    sample_sparse,
    subseed,
    substream,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_CLASSES_THRESHOLD",
    "BinGrid",
    "BinaryBall",
    "BudgetLedger",
    "CalibrationTable",
    "ConfigurationError",
    "ConservativeThreshold",
    "CorrectedDistribution",
    "CoverageBeta",
    "EvasionConfig",
    "GaussianNoise",
    "InputError",
    "L2Ball",
    "MetricsReport",
    "PoisonWitness",
    "PredictionSet",
    "RegionTable",
    "ScoreDistribution",
    "SparseFlipNoise",
    "aps_score",
    "bernstein_radius",
    "bound_for_clean",
    "bound_for_observed",
    "build_region_table",
    "calibrate_smooth",
    "calibration_time_threshold",
    "conformal_quantile",
    "corrected_bound",
    "corrected_calibrate",
    "corrected_distribution",
    "corrected_feature_poison_threshold",
    "corrected_test_set",
    "coverage_distribution",
    "dkw_radius",
    "distribution_from_samples",
    "estimate_distribution",
    "evaluate_sets",
    "feature_poison_threshold",
    "gaussian_cdf_lower",
    "gaussian_cdf_upper",
    "gaussian_mean_lower",
    "gaussian_mean_upper",
    "hoeffding_radius",
    "inverse_quantile",
    "label_poison_threshold",
    "prediction_set",
    "replay_feature_witness",
    "replay_label_witness",
    "sample_gaussian",
    "sample_sparse",
    "smooth_mean_set",
    "sparse_cdf_lower",
    "sparse_cdf_upper",
    "sparse_mean_lower",
    "sparse_mean_upper",
    "subseed",
    "substream",
    "test_time_corrected_sets",
    "test_time_sets",
    "tps_score",
    "vanilla_worst_case_coverage",
    "worst_case_feature_quantile",
    "worst_case_label_quantile",
]
