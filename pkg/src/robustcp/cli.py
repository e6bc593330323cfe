"""Command-line surface: calibrate, predict, certify-poisoning, simulate, oracle-check.

The CLI reads score tensors produced by any ML stack, so smoothing has
already happened upstream; configuration arrives as a flat ``key =
value`` file plus ``--set`` overrides, and every run writes its fully
resolved configuration next to its outputs.

Exit codes: 0 success, 2 malformed input, 3 invariant or assertion
failure, 4 configuration conflict.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .bounds import (
    BinaryBall,
    L2Ball,
    bound_for_clean,
    bound_for_observed,
    build_region_table,
    gaussian_mean_lower,
    gaussian_mean_upper,
    sparse_mean_lower,
    sparse_mean_upper,
)
from .correction import BudgetLedger, corrected_bound
from .errors import ConfigurationError, InputError
from .evasion import CalibrationTable, corrected_set_from_distributions
from .experiments import ExperimentConfig, TaskSpec, run_experiment
from . import formats
from .poisoning import (
    brute_force_feature_threshold,
    brute_force_label_threshold,
    feature_poison_threshold,
    label_poison_threshold,
    replay_feature_witness,
    replay_label_witness,
)
from .scores import PredictionSet, conformal_quantile, evaluate_sets, prediction_set
from .smoothing import (
    BinGrid,
    GaussianNoise,
    SparseFlipNoise,
    distribution_from_samples,
    substream,
)

__all__ = ["main", "CONFIG_SCHEMA"]

_F = formats.ConfigField

# One flat schema shared by all commands; each command reads the keys it
# needs.  Types and defaults are documented in docs/formats.md.
CONFIG_SCHEMA: dict[str, formats.ConfigField] = {
    "alpha": _F("float", 0.1),
    "eta": _F("float", 0.0),
    "scheme": _F("str", "gaussian"),
    "sigma": _F("float", 0.25),
    "p0": _F("float", 0.1),
    "p1": _F("float", 0.1),
    "radius": _F("float", 0.0),
    "additions": _F("int", 0),
    "deletions": _F("int", 0),
    "bound_kind": _F("str", "cdf"),
    "mode": _F("str", "test-time"),
    "grid_edges": _F("int", 51),
    "seed": _F("int", 0),
    "poison_kind": _F("str", "feature"),
    "poison_budget": _F("int", 0),
    "experiment": _F("str", "evasion"),
    "task": _F("str", "gaussian-mixture"),
    "n_classes": _F("int", 3),
    "dim": _F("int", 4),
    "separation": _F("float", 2.0),
    "noise": _F("float", 1.0),
    "strength": _F("float", 0.25),
    "task_seed": _F("int", 7),
    "n_cal": _F("int", 100),
    "n_test": _F("int", 20),
    "n_trials": _F("int", 100),
    "n_samples": _F("int", 10_000),
    "attack_samples": _F("int", 256),
    "score_kind": _F("str", "tps"),
    "radii": _F("str", "0.125"),
    "flips": _F("str", "2:2"),
    "budgets": _F("str", "0,1,2"),
    "alphas": _F("str", ""),
}


def _load_config(args) -> dict:
    text = None
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"{path}: no such config file")
        text = path.read_text()
    return formats.resolve_config(CONFIG_SCHEMA, text, args.set or ())


def _validate_common(cfg: dict) -> None:
    if not 0.0 < cfg["alpha"] < 1.0:
        raise ConfigurationError("alpha must lie in (0, 1)")
    if cfg["eta"] < 0.0:
        raise ConfigurationError("eta must be nonnegative")
    if cfg["eta"] > 0.0 and cfg["eta"] >= cfg["alpha"]:
        raise ConfigurationError("eta must be smaller than alpha when correction is on")
    if cfg["bound_kind"] not in ("mean", "cdf"):
        raise ConfigurationError(f"unknown bound_kind {cfg['bound_kind']!r}")
    if cfg["mode"] not in ("test-time", "calibration-time"):
        raise ConfigurationError(f"unknown mode {cfg['mode']!r}")


def _scheme_and_model(cfg: dict):
    """Cross-validated smoothing scheme and threat model pair."""
    if cfg["scheme"] == "gaussian":
        if cfg["additions"] or cfg["deletions"]:
            raise ConfigurationError("gaussian smoothing pairs with an L2 ball, not flips")
        return GaussianNoise(sigma=cfg["sigma"]), L2Ball(radius=cfg["radius"])
    if cfg["scheme"] == "sparse":
        if cfg["radius"]:
            raise ConfigurationError("sparse smoothing pairs with flip budgets, not an L2 radius")
        return (
            SparseFlipNoise(p0=cfg["p0"], p1=cfg["p1"]),
            BinaryBall(additions=cfg["additions"], deletions=cfg["deletions"]),
        )
    raise ConfigurationError(f"unknown scheme {cfg['scheme']!r}")


def _write_resolved(out_dir: Path, cfg: dict) -> None:
    formats.atomic_write_text(out_dir / "resolved-config.cfg", formats.render_config(cfg))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tensor_distributions(tensor: np.ndarray, grid: BinGrid):
    """Distributions for every (point, class) slice of a score tensor."""
    n_points, n_classes, _ = tensor.shape
    return [
        [distribution_from_samples(tensor[p, c], grid) for c in range(n_classes)]
        for p in range(n_points)
    ]


# ----------------------------------------------------------------- commands --


def cmd_calibrate(args) -> int:
    cfg = _load_config(args)
    _validate_common(cfg)
    scheme, model = _scheme_and_model(cfg)
    out = _out_dir(args)
    tensor = formats.read_score_tensor(args.scores)
    labels = formats.read_labels_csv(args.labels)
    if tensor.shape[0] == 0:
        raise InputError("calibration requires at least one point")
    if tensor.shape[0] != labels.size:
        raise InputError("scores and labels disagree on the number of points")
    if labels.min() < 0 or labels.max() >= tensor.shape[1]:
        raise InputError("labels must index classes of the score tensor")
    if np.any(tensor < 0.0) or np.any(tensor > 1.0):
        raise InputError("scores must lie in [0, 1]")

    grid = BinGrid.uniform(cfg["grid_edges"])
    n = labels.size
    dists = [
        distribution_from_samples(tensor[i, labels[i]], grid) for i in range(n)
    ]
    means = np.array([d.mean for d in dists])
    lower = np.array(
        [bound_for_clean(d, model, scheme, "lower", cfg["bound_kind"]) for d in dists]
    )
    table = CalibrationTable(
        point_ids=np.arange(n),
        smooth_means=means,
        lower_bounds=lower,
        distributions=dists,
    )
    thresholds = {
        "vanilla": conformal_quantile(means, cfg["alpha"]),
        "calibration-time": conformal_quantile(lower, cfg["alpha"]),
    }
    if cfg["eta"] > 0.0:
        ledger = BudgetLedger(eta=cfg["eta"])
        per_point = cfg["eta"] / (2.0 * n)
        corrected = np.empty(n)
        for i, d in enumerate(dists):
            ledger.spend(f"calibration cdf band {i}", per_point)
            corrected[i] = corrected_bound(
                d, model, scheme, "lower", cfg["bound_kind"], per_point, observed=False
            )
        ledger.assert_within()
        table.corrected_lower_bounds = corrected
        thresholds["corrected"] = conformal_quantile(corrected, cfg["alpha"] - cfg["eta"])

    formats.write_calibration_artifact(out / "calibration.json", table, thresholds, cfg)
    _write_resolved(out, cfg)
    print(f"calibrated {n} points; thresholds: " + ", ".join(
        f"{k}={v:.6g}" for k, v in sorted(thresholds.items())
    ))
    return 0


def cmd_predict(args) -> int:
    cfg = _load_config(args)
    _validate_common(cfg)
    scheme, model = _scheme_and_model(cfg)
    out = _out_dir(args)
    table, thresholds, _ = formats.read_calibration_artifact(args.artifact)
    tensor = formats.read_score_tensor(args.scores)
    labels = formats.read_labels_csv(args.labels) if args.labels else None

    if tensor.shape[0] == 0:
        formats.write_sets_csv(out / "sets.csv", {})
        formats.write_metrics_json(
            out / "metrics.json",
            {"format": "robustcp-metrics", "version": 1, "methods": {},
             "thresholds": thresholds},
        )
        _write_resolved(out, cfg)
        print("no test points; wrote empty outputs")
        return 0
    if labels is not None and labels.size != tensor.shape[0]:
        raise InputError("labels and scores disagree on the number of points")
    if np.any(tensor < 0.0) or np.any(tensor > 1.0):
        raise InputError("scores must lie in [0, 1]")
    if cfg["eta"] > 0.0 and cfg["mode"] != "calibration-time":
        raise ConfigurationError("corrected prediction is a calibration-time mode")
    if cfg["eta"] > 0.0 and "corrected" not in thresholds:
        raise ConfigurationError("eta > 0 but the artifact has no corrected threshold")

    grid = table.distributions[0].grid if table.distributions else BinGrid.uniform(
        cfg["grid_edges"]
    )
    per_point = _tensor_distributions(tensor, grid)
    named: dict[str, list[PredictionSet]] = {"vanilla": [], "robust": []}
    if cfg["eta"] > 0.0:
        named["corrected"] = []
    for dists in per_point:
        means = np.array([d.mean for d in dists])
        vanilla = prediction_set(means, thresholds["vanilla"])
        if cfg["mode"] == "test-time":
            upper = np.array(
                [
                    bound_for_observed(d, model, scheme, "upper", cfg["bound_kind"])
                    for d in dists
                ]
            )
            robust = prediction_set(upper, thresholds["vanilla"])
        else:
            robust = prediction_set(means, thresholds["calibration-time"])
        assert vanilla.members <= robust.members, "vanilla set not inside robust set"
        named["vanilla"].append(vanilla)
        named["robust"].append(robust)
        if cfg["eta"] > 0.0:
            corrected = corrected_set_from_distributions(
                dists, thresholds["corrected"], cfg["eta"]
            )
            assert vanilla.members <= corrected.members, (
                "vanilla set not inside corrected set"
            )
            named["corrected"].append(corrected)

    formats.write_sets_csv(out / "sets.csv", named)
    methods = {}
    for name, sets in named.items():
        sizes = [len(s) for s in sets]
        entry: dict[str, object] = {
            "n_points": len(sets),
            "average_size": float(np.mean(sizes)),
            "histogram": {str(k): int(v) for k, v in
                          zip(*np.unique(sizes, return_counts=True))},
        }
        if labels is not None:
            report = evaluate_sets(sets, labels)
            entry["coverage"] = report.empirical_coverage
            entry["singleton_hit_ratio"] = report.singleton_hit_ratio
        methods[name] = entry
    formats.write_metrics_json(
        out / "metrics.json",
        {"format": "robustcp-metrics", "version": 1, "methods": methods,
         "thresholds": thresholds},
    )
    _write_resolved(out, cfg)
    print(f"predicted {tensor.shape[0]} points with methods: " + ", ".join(sorted(named)))
    return 0


def cmd_certify_poisoning(args) -> int:
    cfg = _load_config(args)
    _validate_common(cfg)
    out = _out_dir(args)
    budget = cfg["poison_budget"]
    if budget < 0:
        raise ConfigurationError("poison_budget must be nonnegative")
    kind = cfg["poison_kind"]
    if kind == "feature":
        scores, lower = formats.read_feature_bounds_csv(args.input)
        result = feature_poison_threshold(scores, lower, budget, cfg["alpha"])
        replayed = replay_feature_witness(scores, result.witness, cfg["alpha"])
        assert replayed == result.threshold, "witness replay mismatch"
        if args.check_oracle:
            if scores.size > 12:
                raise ConfigurationError("oracle check supports at most 12 points")
            oracle = brute_force_feature_threshold(scores, lower, budget, cfg["alpha"])
            assert oracle == result.threshold, "brute-force oracle disagrees"
        formats.write_witness_json(
            out / "witness.json", kind, cfg["alpha"], budget, scores.size,
            result.threshold, result.rank, result.witness.indices,
            values=result.witness.values,
        )
        n = scores.size
    elif kind == "label":
        if not args.labels:
            raise InputError("label poisoning needs --labels")
        matrix = formats.read_score_matrix_csv(args.input)
        labels = formats.read_labels_csv(args.labels)
        result = label_poison_threshold(matrix, labels, budget, cfg["alpha"])
        replayed = replay_label_witness(matrix, labels, result.witness, cfg["alpha"])
        assert replayed == result.threshold, "witness replay mismatch"
        if args.check_oracle:
            if matrix.shape[0] > 12 or matrix.shape[1] > 6:
                raise ConfigurationError(
                    "oracle check supports at most 12 points and 6 classes"
                )
            oracle = brute_force_label_threshold(matrix, labels, budget, cfg["alpha"])
            assert oracle == result.threshold, "brute-force oracle disagrees"
        formats.write_witness_json(
            out / "witness.json", kind, cfg["alpha"], budget, matrix.shape[0],
            result.threshold, result.rank, result.witness.indices,
            values=result.witness.values, labels=result.witness.labels,
        )
        n = matrix.shape[0]
    else:
        raise ConfigurationError(f"unknown poison_kind {kind!r}")
    _write_resolved(out, cfg)
    print(
        f"certified {kind} poisoning for {n} points at budget {budget}: "
        f"threshold {result.threshold:.6g} (rank {result.rank})"
    )
    return 0


def _parse_floats(raw: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise InputError(f"config key {key!r}: {exc}") from exc


def _parse_flips(raw: str) -> tuple[tuple[int, int], ...]:
    flips = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        pieces = part.split(":")
        if len(pieces) != 2:
            raise InputError("config key 'flips': entries look like additions:deletions")
        try:
            flips.append((int(pieces[0]), int(pieces[1])))
        except ValueError as exc:
            raise InputError(f"config key 'flips': {exc}") from exc
    return tuple(flips)


def _parse_ints(raw: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError as exc:
        raise InputError(f"config key {key!r}: {exc}") from exc


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    _validate_common(cfg)
    out = _out_dir(args)
    spec = TaskSpec(
        kind=cfg["task"],
        n_classes=cfg["n_classes"],
        dim=cfg["dim"],
        separation=cfg["separation"],
        noise=cfg["noise"],
        strength=cfg["strength"],
        task_seed=cfg["task_seed"],
        n_cal=cfg["n_cal"],
        n_test=cfg["n_test"],
    )
    experiment = ExperimentConfig(
        kind=cfg["experiment"],
        task=spec,
        alpha=cfg["alpha"],
        score_kind=cfg["score_kind"],
        sigma=cfg["sigma"],
        p0=cfg["p0"],
        p1=cfg["p1"],
        radii=_parse_floats(cfg["radii"], "radii"),
        flips=_parse_flips(cfg["flips"]),
        budgets=_parse_ints(cfg["budgets"], "budgets"),
        alphas=_parse_floats(cfg["alphas"], "alphas"),
        bound_kind=cfg["bound_kind"],
        eta=cfg["eta"],
        n_samples=cfg["n_samples"],
        attack_samples=cfg["attack_samples"],
        grid_edges=cfg["grid_edges"],
        n_trials=cfg["n_trials"],
        seed=cfg["seed"],
    )
    summary = run_experiment(experiment, out)
    _write_resolved(out, cfg)
    print(
        f"ran {cfg['n_trials']} {cfg['experiment']} trials: "
        f"{len(summary.results)} ok, {len(summary.failures)} failed"
    )
    if summary.failures:
        for failure in summary.failures:
            print(f"trial {failure.trial} failed: {failure.error}", file=sys.stderr)
        return 3
    return 0


def _oracle_checks():
    """Deterministic self-checks of the certified machinery.

    Each check recomputes a quantity along an independent route; yields
    (name, passed) pairs.
    """
    from scipy import stats

    rng = substream(20240, "oracle-check")

    # Gaussian closed forms against the generic normal distribution.
    p, radius, sigma = 0.5, 0.25, 0.25
    direct = gaussian_mean_upper(p, radius, sigma)
    via_stats = float(stats.norm.cdf(stats.norm.ppf(p) + radius / sigma))
    yield "gaussian mean upper vs scipy.stats route", abs(direct - via_stats) < 1e-12
    lower = gaussian_mean_lower(p, radius, sigma)
    yield "gaussian bounds bracket the input", lower <= p <= direct

    # Sparse region table against direct enumeration of noise outcomes on
    # the perturbed coordinates (a region collects the outcomes agreeing
    # with the adversarial point on the same number of them).
    ok = True
    r_add, r_del = 1, 2
    for p0, p1 in ((0.2, 0.2), (0.01, 0.6)):
        table = build_region_table(r_add, r_del, p0, p1)
        width = r_add + r_del
        clean_by_ones = np.zeros(width + 1)
        adv_by_ones = np.zeros(width + 1)
        for bits in range(2 ** width):
            z = [(bits >> j) & 1 for j in range(width)]
            pr_clean = pr_adv = 1.0
            for j, value in enumerate(z):
                if j < r_add:  # clean 0, adversarial 1
                    pr_clean *= p0 if value else 1.0 - p0
                    pr_adv *= 1.0 - p1 if value else p1
                else:  # clean 1, adversarial 0
                    pr_clean *= 1.0 - p1 if value else p1
                    pr_adv *= p0 if value else 1.0 - p0
            agree_adv = sum(z[:r_add]) + sum(1 - v for v in z[r_add:])
            clean_by_ones[agree_adv] += pr_clean
            adv_by_ones[agree_adv] += pr_adv
        ok = ok and table.clean_mass.size == width + 1
        ok = ok and np.allclose(table.clean_mass, clean_by_ones, atol=1e-12, rtol=0)
        ok = ok and np.allclose(table.adv_mass, adv_by_ones, atol=1e-12, rtol=0)
    yield "sparse region masses vs enumeration", ok

    # Sparse mean transfer sandwiched and monotone.
    table = build_region_table(2, 2, 0.15, 0.15)
    ok = True
    for p in (0.05, 0.3, 0.8, 0.95):
        lo = sparse_mean_lower(p, table)
        hi = sparse_mean_upper(p, table)
        ok = ok and lo <= p <= hi
    yield "sparse mean bounds bracket the input", ok

    # Rank-search solvers against the brute-force oracle.
    ok = True
    for _ in range(25):
        n = int(rng.integers(3, 9))
        scores = rng.random(n)
        lower = scores * rng.random(n)
        k = int(rng.integers(0, 3))
        fast = feature_poison_threshold(scores, lower, k, 0.25).threshold
        slow = brute_force_feature_threshold(scores, lower, k, 0.25)
        ok = ok and fast == slow
    yield "feature poisoning vs brute force", ok

    ok = True
    for _ in range(25):
        n = int(rng.integers(3, 9))
        n_classes = int(rng.integers(2, 5))
        matrix = rng.random((n, n_classes))
        labels = rng.integers(0, n_classes, size=n)
        k = int(rng.integers(0, 3))
        fast = label_poison_threshold(matrix, labels, k, 0.25).threshold
        slow = brute_force_label_threshold(matrix, labels, k, 0.25)
        ok = ok and fast == slow
    yield "label poisoning vs brute force", ok

    # Quantile round trip.
    from .scores import inverse_quantile

    ok = True
    for _ in range(25):
        scores = rng.random(int(rng.integers(5, 40)))
        alpha = float(rng.uniform(0.05, 0.5))
        q = conformal_quantile(scores, alpha)
        ok = ok and inverse_quantile(q, scores) <= alpha
    yield "threshold level within alpha", ok


def cmd_oracle_check(args) -> int:
    failed = 0
    for name, passed in _oracle_checks():
        print(f"{'ok  ' if passed else 'FAIL'} {name}")
        failed += 0 if passed else 1
    if failed:
        print(f"{failed} oracle check(s) failed", file=sys.stderr)
        return 3
    return 0


# ------------------------------------------------------------------ parsing --


def _add_common(sub) -> None:
    sub.add_argument("--config", help="flat key = value configuration file")
    sub.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robustcp",
        description="Conformal prediction sets with certified robustness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit thresholds from a calibration score tensor")
    p.add_argument("--scores", required=True, help="score tensor (.csv or .bin)")
    p.add_argument("--labels", required=True, help="calibration labels csv")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="prediction sets for a test score tensor")
    p.add_argument("--artifact", required=True, help="calibration artifact json")
    p.add_argument("--scores", required=True, help="test score tensor (.csv or .bin)")
    p.add_argument("--labels", help="optional test labels csv for coverage metrics")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser(
        "certify-poisoning", help="conservative threshold under a poisoning budget"
    )
    p.add_argument("--input", required=True, help="scores-and-bounds csv (or score matrix)")
    p.add_argument("--labels", help="labels csv (label poisoning only)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--check-oracle", action="store_true",
        help="cross-check against the exhaustive oracle (small instances only)",
    )
    _add_common(p)
    p.set_defaults(func=cmd_certify_poisoning)

    p = sub.add_parser("simulate", help="run a synthetic experiment suite")
    p.add_argument("--out", required=True, help="results directory")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle-check", help="self-check solvers against slow oracles")
    _add_common(p)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 4
    except (ValueError, AssertionError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
