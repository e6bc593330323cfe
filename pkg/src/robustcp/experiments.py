"""Synthetic tasks, attack simulation, and the desk-scale experiment runner.

A trial samples fresh calibration and test splits from a fixed
closed-form task, runs one pipeline (plain conformal, evasion defenses,
poisoning defenses, or the finite-sample corrected variants), and
reports per-method coverage and set sizes.  ``run_experiment`` fans
trials out over seeded substreams (optionally across processes), writes
``trials.jsonl``, ``aggregate.csv``, and ``plotdata/*.csv``, and keeps
going when an individual trial fails.

Attacks here are best-effort stressors: certificates hold against any
perturbation in the threat model, the attacks only witness how far the
unprotected pipeline degrades.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attacks import evade_binary, evade_l2, poison_features_attack, poison_labels_attack
from .bounds import BinaryBall, L2Ball, ThreatModel, bound_for_observed
from .correction import BudgetLedger
from .errors import ConfigurationError
from .evasion import (
    EvasionConfig,
    calibrate_smooth,
    calibration_time_threshold,
    class_distributions,
    corrected_calibrate,
    corrected_set_from_distributions,
    lower_bounds_for,
    mean_set_from_distributions,
    sets_from_distributions,
    vanilla_worst_case_coverage,
)
from .formats import atomic_write_text
from .poisoning import (
    corrected_feature_poison_threshold,
    feature_poison_threshold,
    label_poison_threshold,
)
from .scores import conformal_quantile, evaluate_sets, prediction_set
from .smoothing import BinGrid, GaussianNoise, SparseFlipNoise, subseed, substream
from .tasks import (
    aps_oracle,
    make_binary_task,
    make_gaussian_mixture,
    plain_score_matrix,
    tps_oracle,
)

__all__ = [
    "TaskSpec",
    "ExperimentConfig",
    "TrialResult",
    "TrialFailure",
    "ExperimentSummary",
    "generate_task",
    "scheme_for",
    "models_for",
    "marginal_trial",
    "evasion_trial",
    "label_poison_trial",
    "feature_poison_trial",
    "corrected_trial",
    "run_experiment",
    "worker_count",
]

EXPERIMENT_KINDS = ("marginal", "evasion", "label-poison", "feature-poison", "corrected")


@dataclass(frozen=True)
class TaskSpec:
    """Recipe for a synthetic task and the size of its per-trial splits.

    ``separation`` and ``noise`` shape the gaussian-mixture task,
    ``strength`` the binary-linear one; the unused fields are ignored.
    The classifier is fixed by ``task_seed`` while data splits are
    resampled per trial, so trials are exchangeable draws from one task.
    """

    kind: str = "gaussian-mixture"
    n_classes: int = 3
    dim: int = 4
    separation: float = 2.0
    noise: float = 1.0
    strength: float = 0.25
    task_seed: int = 7
    n_cal: int = 100
    n_test: int = 20

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian-mixture", "binary-linear"):
            raise ConfigurationError(f"unknown task kind {self.kind!r}")
        if self.n_cal < 10 or self.n_test < 1:
            raise ConfigurationError("need n_cal >= 10 and n_test >= 1")


def build_task(spec: TaskSpec):
    """Closed-form classifier for a spec (no training involved)."""
    if spec.kind == "gaussian-mixture":
        return make_gaussian_mixture(
            n_classes=spec.n_classes,
            dim=spec.dim,
            separation=spec.separation,
            noise=spec.noise,
            seed=spec.task_seed,
        )
    return make_binary_task(
        n_classes=spec.n_classes,
        dim=spec.dim,
        strength=spec.strength,
        seed=spec.task_seed,
    )


def generate_task(spec: TaskSpec, seed: int):
    """Task plus fresh, exchangeable calibration and test splits."""
    task = build_task(spec)
    x_cal, y_cal = task.sample(spec.n_cal, substream(seed, "cal-data"))
    x_test, y_test = task.sample(spec.n_test, substream(seed, "test-data"))
    return task, (x_cal, y_cal), (x_test, y_test)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run needs, independent of output paths."""

    kind: str
    task: TaskSpec = field(default_factory=TaskSpec)
    alpha: float = 0.1
    score_kind: str = "tps"
    sigma: float = 0.25
    p0: float = 0.1
    p1: float = 0.1
    radii: tuple[float, ...] = (0.125,)
    flips: tuple[tuple[int, int], ...] = ((2, 2),)
    budgets: tuple[int, ...] = (0, 1, 2)
    alphas: tuple[float, ...] = ()
    bound_kind: str = "cdf"
    eta: float = 0.01
    n_samples: int = 10_000
    attack_samples: int = 256
    grid_edges: int = 51
    n_trials: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.score_kind not in ("tps", "aps"):
            raise ConfigurationError(f"unknown score kind {self.score_kind!r}")
        if self.n_trials < 1:
            raise ConfigurationError("need at least one trial")


def scheme_for(config: ExperimentConfig):
    """Smoothing scheme matched to the task's feature space."""
    if config.task.kind == "gaussian-mixture":
        return GaussianNoise(sigma=config.sigma)
    return SparseFlipNoise(p0=config.p0, p1=config.p1)


def models_for(config: ExperimentConfig) -> list[ThreatModel]:
    """Threat models swept by the run, matched to the task."""
    if config.task.kind == "gaussian-mixture":
        return [L2Ball(radius=r) for r in config.radii]
    return [BinaryBall(additions=a, deletions=d) for a, d in config.flips]


def _oracle_for(task, score_kind: str):
    return tps_oracle(task) if score_kind == "tps" else aps_oracle(task)


def _radius_value(model: ThreatModel) -> float:
    if isinstance(model, L2Ball):
        return float(model.radius)
    return float(model.additions + model.deletions)


def _attack_point(oracle, x, label, model, scheme, rng, n_samples):
    if isinstance(model, L2Ball):
        return evade_l2(oracle, x, label, model.radius, scheme, rng, n_samples=n_samples)
    return evade_binary(
        oracle, x, label, model.additions, model.deletions, scheme, rng,
        n_samples=n_samples,
    )


def _metrics(sets, labels) -> dict[str, float]:
    report = evaluate_sets(sets, labels)
    return {
        "coverage": report.empirical_coverage,
        "size": report.average_set_size,
        "singleton": report.singleton_hit_ratio,
    }


@dataclass
class TrialResult:
    """Per-trial metrics rows plus the thresholds that produced them.

    ``runtime`` stays in memory only; serialized records exclude it so
    result files are byte-identical across re-runs.
    """

    trial: int
    seed: int
    rows: list[dict]
    thresholds: dict[str, float]
    runtime: float

    def __post_init__(self) -> None:
        for row in self.rows:
            cov = row.get("coverage")
            if cov is not None and not 0.0 <= cov <= 1.0:
                raise ValueError(f"coverage outside [0, 1] in row {row!r}")
            beta = row.get("beta")
            if beta is not None and not 0.0 <= beta <= 1.0:
                raise ValueError(f"beta outside [0, 1] in row {row!r}")

    def record(self) -> dict:
        return {
            "trial": self.trial,
            "seed": self.seed,
            "thresholds": self.thresholds,
            "rows": self.rows,
        }


@dataclass(frozen=True)
class TrialFailure:
    trial: int
    error: str

    def record(self) -> dict:
        return {"trial": self.trial, "error": self.error}


# ------------------------------------------------------------------- trials --


def marginal_trial(config: ExperimentConfig, index: int) -> TrialResult:
    """Plain split conformal on fresh data, swept over miscoverage levels."""
    t0 = time.perf_counter()
    ts = subseed(config.seed, "trial", index)
    task, (x_cal, y_cal), (x_test, y_test) = generate_task(config.task, ts)
    cal_matrix = plain_score_matrix(
        task, x_cal, config.score_kind, substream(ts, "plain", "cal")
    )
    test_matrix = plain_score_matrix(
        task, x_test, config.score_kind, substream(ts, "plain", "test")
    )
    cal_scores = cal_matrix[np.arange(len(y_cal)), y_cal]
    alphas = config.alphas or (config.alpha,)
    rows = []
    thresholds = {}
    for alpha in alphas:
        q = conformal_quantile(cal_scores, alpha)
        sets = [prediction_set(row, q) for row in test_matrix]
        rows.append({"alpha": alpha, "method": "vanilla", **_metrics(sets, y_test)})
        thresholds[f"alpha={alpha:g}"] = q
    return TrialResult(index, ts, rows, thresholds, time.perf_counter() - t0)


def evasion_trial(config: ExperimentConfig, index: int) -> TrialResult:
    """Evasion pipeline: one smooth calibration, attacks per threat radius.

    For each radius the attacked test points are scored three ways with
    shared Monte-Carlo draws: plain smooth means (vanilla), certified
    upper bounds from the mean-only bound, and from the binned-CDF
    bound.  Each certified method also reports its worst-case coverage
    floor ``beta`` for the vanilla set at that radius.
    """
    t0 = time.perf_counter()
    ts = subseed(config.seed, "trial", index)
    task, (x_cal, y_cal), (x_test, y_test) = generate_task(config.task, ts)
    oracle = _oracle_for(task, config.score_kind)
    scheme = scheme_for(config)
    models = models_for(config)
    grid = BinGrid.uniform(config.grid_edges)
    base = EvasionConfig(
        scheme=scheme, model=models[0], mode="test-time", bound_kind="mean",
        n_samples=config.n_samples, grid=grid,
    )
    table, threshold = calibrate_smooth(oracle, x_cal, y_cal, config.alpha, base, seed=ts)
    n_classes = config.task.n_classes
    rows = []
    thresholds = {"clean": threshold}

    clean_sets = []
    for i in range(len(y_test)):
        dists = class_distributions(oracle, x_test[i], n_classes, base, ts, i)
        clean_sets.append(mean_set_from_distributions(dists, threshold))
    rows.append(
        {"radius": 0.0, "method": "vanilla", **_metrics(clean_sets, y_test)}
    )

    for model in models:
        cfg_mean = replace(base, model=model, bound_kind="mean")
        cfg_cdf = replace(base, model=model, bound_kind="cdf")
        beta_mean = vanilla_worst_case_coverage(
            table, threshold, lower_bounds_for(table, cfg_mean)
        )
        beta_cdf = vanilla_worst_case_coverage(
            table, threshold, lower_bounds_for(table, cfg_cdf)
        )
        label = f"r={_radius_value(model):g}"
        sets_vanilla, sets_mean, sets_cdf = [], [], []
        for i in range(len(y_test)):
            attacked = _attack_point(
                oracle, x_test[i], int(y_test[i]), model, scheme,
                substream(ts, "attack", label, i), config.attack_samples,
            )
            dists = class_distributions(oracle, attacked, n_classes, base, ts, i)
            sets_vanilla.append(mean_set_from_distributions(dists, threshold))
            sets_mean.append(sets_from_distributions(dists, threshold, cfg_mean))
            sets_cdf.append(sets_from_distributions(dists, threshold, cfg_cdf))
        r = _radius_value(model)
        rows.append(
            {"radius": r, "method": "vanilla", **_metrics(sets_vanilla, y_test)}
        )
        rows.append(
            {
                "radius": r, "method": "mean-bound",
                **_metrics(sets_mean, y_test), "beta": beta_mean,
            }
        )
        rows.append(
            {
                "radius": r, "method": "cdf-bound",
                **_metrics(sets_cdf, y_test), "beta": beta_cdf,
            }
        )
    return TrialResult(index, ts, rows, thresholds, time.perf_counter() - t0)


def label_poison_trial(config: ExperimentConfig, index: int) -> TrialResult:
    """Label flipping against plain conformal, swept over budgets.

    The attacker flips the labels the maximizing rank search picks; the
    defender sees the poisoned labels and calibrates with the
    minimizing search at the same budget.
    """
    t0 = time.perf_counter()
    ts = subseed(config.seed, "trial", index)
    task, (x_cal, y_cal), (x_test, y_test) = generate_task(config.task, ts)
    cal_matrix = plain_score_matrix(
        task, x_cal, config.score_kind, substream(ts, "plain", "cal")
    )
    test_matrix = plain_score_matrix(
        task, x_test, config.score_kind, substream(ts, "plain", "test")
    )
    rows = []
    thresholds = {}
    n = len(y_cal)
    for k in config.budgets:
        poisoned, _ = poison_labels_attack(cal_matrix, y_cal, k, config.alpha)
        observed = cal_matrix[np.arange(n), poisoned]
        q_vanilla = conformal_quantile(observed, config.alpha)
        conservative = label_poison_threshold(cal_matrix, poisoned, k, config.alpha)
        sets_vanilla = [prediction_set(row, q_vanilla) for row in test_matrix]
        sets_robust = [
            prediction_set(row, conservative.threshold) for row in test_matrix
        ]
        rows.append(
            {"budget": k, "method": "vanilla", **_metrics(sets_vanilla, y_test)}
        )
        rows.append(
            {"budget": k, "method": "robust", **_metrics(sets_robust, y_test)}
        )
        thresholds[f"vanilla-k{k}"] = q_vanilla
        thresholds[f"robust-k{k}"] = conservative.threshold
    return TrialResult(index, ts, rows, thresholds, time.perf_counter() - t0)


def feature_poison_trial(config: ExperimentConfig, index: int) -> TrialResult:
    """Feature poisoning against the smoothed pipeline, swept over budgets.

    The attacker perturbs its rank-search pick of calibration points
    inside the threat ball; the defender re-estimates on what it
    received and deflates with certified lower bounds at the reversed
    ball before running the minimizing search.
    """
    t0 = time.perf_counter()
    ts = subseed(config.seed, "trial", index)
    task, (x_cal, y_cal), (x_test, y_test) = generate_task(config.task, ts)
    oracle = _oracle_for(task, config.score_kind)
    scheme = scheme_for(config)
    model = models_for(config)[0]
    grid = BinGrid.uniform(config.grid_edges)
    cfg = EvasionConfig(
        scheme=scheme, model=model, mode="calibration-time",
        bound_kind=config.bound_kind, n_samples=config.n_samples, grid=grid,
    )
    table, _ = calibrate_smooth(oracle, x_cal, y_cal, config.alpha, cfg, seed=ts)
    n_classes = config.task.n_classes
    test_means = []
    for i in range(len(y_test)):
        dists = class_distributions(oracle, x_test[i], n_classes, cfg, ts, i)
        test_means.append(np.array([d.mean for d in dists]))
    rows = []
    thresholds = {}
    for k in config.budgets:
        if k == 0:
            received, table_k = x_cal, table
        else:
            received, _ = poison_features_attack(
                oracle, x_cal, y_cal, table, k, config.alpha, cfg,
                seed=subseed(ts, "attack", k), n_samples=config.attack_samples,
            )
            table_k, _ = calibrate_smooth(
                oracle, received, y_cal, config.alpha, cfg,
                seed=subseed(ts, "defender", k),
            )
        lower = np.array(
            [
                bound_for_observed(d, model, scheme, "lower", config.bound_kind)
                for d in table_k.distributions
            ]
        )
        q_vanilla = conformal_quantile(table_k.smooth_means, config.alpha)
        conservative = feature_poison_threshold(
            table_k.smooth_means, lower, k, config.alpha
        )
        sets_vanilla = [prediction_set(m, q_vanilla) for m in test_means]
        sets_robust = [prediction_set(m, conservative.threshold) for m in test_means]
        rows.append(
            {"budget": k, "method": "vanilla", **_metrics(sets_vanilla, y_test)}
        )
        rows.append(
            {"budget": k, "method": "robust", **_metrics(sets_robust, y_test)}
        )
        thresholds[f"vanilla-k{k}"] = q_vanilla
        thresholds[f"robust-k{k}"] = conservative.threshold
    return TrialResult(index, ts, rows, thresholds, time.perf_counter() - t0)


def corrected_trial(config: ExperimentConfig, index: int) -> TrialResult:
    """Finite-sample corrected pipelines on clean data.

    Covers both corrected procedures: calibration-time sets whose
    Monte-Carlo error is budgeted through a ledger, and conservative
    poisoning thresholds computed from corrected lower bounds.  The
    uncorrected counterparts run on the same draws so per-trial
    threshold dominance can be checked exactly.
    """
    t0 = time.perf_counter()
    ts = subseed(config.seed, "trial", index)
    task, (x_cal, y_cal), (x_test, y_test) = generate_task(config.task, ts)
    oracle = _oracle_for(task, config.score_kind)
    scheme = scheme_for(config)
    model = models_for(config)[0]
    grid = BinGrid.uniform(config.grid_edges)
    cfg = EvasionConfig(
        scheme=scheme, model=model, mode="calibration-time",
        bound_kind=config.bound_kind, n_samples=config.n_samples, grid=grid,
        eta=config.eta,
    )
    table, thr_corrected, ledger = corrected_calibrate(
        oracle, x_cal, y_cal, config.alpha, cfg, seed=ts
    )
    ledger.assert_within()
    thr_plain = calibration_time_threshold(table, config.alpha)

    n_classes = config.task.n_classes
    sets_corrected, sets_plain = [], []
    per_test = [
        class_distributions(oracle, x_test[i], n_classes, cfg, ts, i)
        for i in range(len(y_test))
    ]
    for i, dists in enumerate(per_test):
        # One prediction's budget: the calibration half plus this point's half.
        point_ledger = BudgetLedger(eta=config.eta)
        point_ledger.spend("calibration side", ledger.spent)
        sets_corrected.append(
            corrected_set_from_distributions(
                dists, thr_corrected, config.eta, point_ledger, i
            )
        )
        point_ledger.assert_within()
        sets_plain.append(mean_set_from_distributions(dists, thr_plain))

    rows = [
        {"method": "corrected-sets", **_metrics(sets_corrected, y_test)},
        {"method": "uncorrected-sets", **_metrics(sets_plain, y_test)},
    ]
    thresholds = {"corrected": thr_corrected, "uncorrected": thr_plain}

    for k in config.budgets:
        conservative, poison_ledger = corrected_feature_poison_threshold(
            table.distributions, model, scheme, k, config.alpha, config.eta,
            bound_kind=config.bound_kind,
        )
        poison_ledger.assert_within()
        lower_plain = np.array(
            [
                bound_for_observed(d, model, scheme, "lower", config.bound_kind)
                for d in table.distributions
            ]
        )
        plain = feature_poison_threshold(
            table.smooth_means, np.minimum(lower_plain, table.smooth_means),
            k, config.alpha,
        )
        sets_k = [
            mean_set_from_distributions(dists, conservative.threshold)
            for dists in per_test
        ]
        rows.append(
            {
                "budget": k, "method": "corrected-threshold",
                **_metrics(sets_k, y_test),
            }
        )
        thresholds[f"corrected-k{k}"] = conservative.threshold
        thresholds[f"uncorrected-k{k}"] = plain.threshold
    return TrialResult(index, ts, rows, thresholds, time.perf_counter() - t0)


_TRIAL_FUNCTIONS: dict[str, Callable[[ExperimentConfig, int], TrialResult]] = {
    "marginal": marginal_trial,
    "evasion": evasion_trial,
    "label-poison": label_poison_trial,
    "feature-poison": feature_poison_trial,
    "corrected": corrected_trial,
}


# ------------------------------------------------------------------- runner --


def worker_count() -> int:
    """Worker processes requested via the ROBUSTCP_WORKERS variable."""
    raw = os.environ.get("ROBUSTCP_WORKERS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigurationError(f"ROBUSTCP_WORKERS must be an integer, got {raw!r}")
    if count < 1:
        raise ConfigurationError("ROBUSTCP_WORKERS must be at least 1")
    return count


def _run_one(config: ExperimentConfig, index: int) -> TrialResult | TrialFailure:
    try:
        return _TRIAL_FUNCTIONS[config.kind](config, index)
    except Exception as exc:  # noqa: BLE001 - partial-failure policy
        return TrialFailure(index, f"{type(exc).__name__}: {exc}")


@dataclass
class ExperimentSummary:
    results: list[TrialResult]
    failures: list[TrialFailure]
    aggregate: list[dict]


_COORDINATES = ("radius", "alpha", "budget")


def _group_key(row: dict):
    for name in _COORDINATES:
        if name in row:
            return (name, row[name], row["method"])
    return ("", "", row["method"])


def _sort_key(key: tuple) -> tuple:
    name, value, method = key
    return (name, float(value) if value != "" else -1.0, method)


def aggregate_rows(results: Sequence[TrialResult]) -> list[dict]:
    """Mean and standard deviation of every metric per (coordinate, method)."""
    groups: dict[tuple, list[dict]] = {}
    for result in results:
        for row in result.rows:
            groups.setdefault(_group_key(row), []).append(row)
    out = []
    for (name, value, method), rows in sorted(groups.items(), key=lambda kv: _sort_key(kv[0])):
        entry: dict[str, object] = {
            "x_name": name,
            "x_value": value,
            "method": method,
            "trials": len(rows),
        }
        for metric in ("coverage", "size", "singleton", "beta"):
            values = [row[metric] for row in rows if row.get(metric) is not None]
            if values:
                entry[f"{metric}_mean"] = float(np.mean(values))
                entry[f"{metric}_std"] = float(np.std(values))
        out.append(entry)
    return out


_AGGREGATE_COLUMNS = [
    "x_name", "x_value", "method", "trials",
    "coverage_mean", "coverage_std", "size_mean", "size_std",
    "singleton_mean", "singleton_std", "beta_mean", "beta_std",
]


def _render_csv(columns: list[str], rows: list[dict]) -> str:
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            value = row.get(col, "")
            if isinstance(value, float):
                value = repr(value)
            cells.append(str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _plot_rows(aggregate: list[dict], coordinate: str, metric: str) -> list[dict]:
    rows = []
    for entry in aggregate:
        if entry["x_name"] == coordinate and f"{metric}_mean" in entry:
            rows.append(
                {
                    coordinate: entry["x_value"],
                    "method": entry["method"],
                    metric: entry[f"{metric}_mean"],
                }
            )
    return sorted(rows, key=lambda r: (r[coordinate], r["method"]))


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> ExperimentSummary:
    """Run all trials, write result files, and return the summary.

    A failing trial is recorded in ``trials.jsonl`` with its error and
    excluded from aggregation; the run itself keeps going.
    """
    out = Path(out_dir)
    plot_dir = out / "plotdata"
    plot_dir.mkdir(parents=True, exist_ok=True)
    workers = worker_count()
    indices = range(config.n_trials)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(partial(_run_one, config), indices))
    else:
        outcomes = [_run_one(config, i) for i in indices]

    results = [o for o in outcomes if isinstance(o, TrialResult)]
    failures = [o for o in outcomes if isinstance(o, TrialFailure)]
    lines = [json.dumps(o.record(), sort_keys=True) for o in outcomes]
    atomic_write_text(out / "trials.jsonl", "\n".join(lines) + "\n")

    aggregate = aggregate_rows(results)
    atomic_write_text(out / "aggregate.csv", _render_csv(_AGGREGATE_COLUMNS, aggregate))

    plots = {
        "coverage_vs_radius.csv": ("radius", "coverage"),
        "size_vs_radius.csv": ("radius", "size"),
        "size_vs_alpha.csv": ("alpha", "size"),
        "coverage_vs_budget.csv": ("budget", "coverage"),
        "size_vs_budget.csv": ("budget", "size"),
    }
    for filename, (coordinate, metric) in plots.items():
        rows = _plot_rows(aggregate, coordinate, metric)
        text = _render_csv([coordinate, "method", metric], rows)
        atomic_write_text(plot_dir / filename, text)
    return ExperimentSummary(results=results, failures=failures, aggregate=aggregate)
