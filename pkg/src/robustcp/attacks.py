"""Heuristic attacks used to stress the pipelines empirically.

These are evaluation tools, not certificates: each attack searches
inside the declared threat model for a perturbation that hurts the
conformal pipeline, so coverage measured under them is an upper bound
on worst-case coverage.  The clean input is always in the candidate
pool, so an attack never reports a result worse than doing nothing.
"""

from __future__ import annotations

import warnings

import numpy as np

from .bounds import BinaryBall, L2Ball, ThreatModel, bound_for_clean
from .evasion import CalibrationTable, ClassScoreOracle, EvasionConfig
from .poisoning import PoisonWitness, worst_case_feature_quantile, worst_case_label_quantile
from .smoothing import GaussianNoise, SparseFlipNoise, substream

__all__ = [
    "evade_l2",
    "evade_binary",
    "poison_labels_attack",
    "poison_features_attack",
]


def _smooth_objective(
    oracle: ClassScoreOracle,
    label: int,
    scheme,
    n_samples: int,
    rng: np.random.Generator,
):
    """Monte-Carlo smooth-score estimate of one class, batched over candidates."""

    def objective(candidates: np.ndarray) -> np.ndarray:
        candidates = np.atleast_2d(candidates)
        n_cand, dim = candidates.shape
        if isinstance(scheme, GaussianNoise):
            noisy = np.repeat(candidates, n_samples, axis=0)
            noisy = noisy + scheme.sigma * rng.standard_normal(noisy.shape)
        elif isinstance(scheme, SparseFlipNoise):
            flip_prob = np.where(candidates == 1, scheme.p1, scheme.p0)
            flip_prob = np.repeat(flip_prob, n_samples, axis=0)
            base = np.repeat(candidates, n_samples, axis=0)
            flips = rng.random(base.shape) < flip_prob
            noisy = np.where(flips, 1 - base, base)
        else:
            raise TypeError(f"unknown smoothing scheme: {scheme!r}")
        scores = oracle(noisy, label, rng)
        return np.asarray(scores, dtype=float).reshape(n_cand, n_samples).mean(axis=1)

    return objective


def evade_l2(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    label: int,
    radius: float,
    scheme: GaussianNoise,
    rng: np.random.Generator,
    n_samples: int = 256,
    n_random: int = 8,
    n_refine: int = 2,
    maximize: bool = False,
) -> np.ndarray:
    """Projected random directions plus coordinate search inside an L2 ball.

    Minimizes (or maximizes) the estimated smooth score of ``label``;
    returns the best candidate found, which is ``x`` itself when nothing
    inside the ball beats it under the attack's own estimates.
    """
    x = np.asarray(x, dtype=float)
    if radius == 0.0:
        return x.copy()
    objective = _smooth_objective(oracle, label, scheme, n_samples, rng)
    sign = -1.0 if maximize else 1.0
    dim = x.size

    dirs = rng.standard_normal((n_random, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    coord = np.concatenate([np.eye(dim), -np.eye(dim)])
    candidates = np.concatenate([x[None, :], x + radius * dirs, x + radius * coord])
    values = sign * objective(candidates)
    best = candidates[int(np.argmin(values))]
    best_value = values.min()

    step = radius / 4.0
    for _ in range(n_refine):
        moves = best[None, :] + step * np.concatenate([np.eye(dim), -np.eye(dim)])
        # Project each move back onto the ball around the clean input.
        delta = moves - x[None, :]
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        scale = np.minimum(1.0, radius / np.maximum(norms, 1e-12))
        moves = x[None, :] + delta * scale
        values = sign * objective(moves)
        if values.min() < best_value:
            best_value = values.min()
            best = moves[int(np.argmin(values))]
    assert np.linalg.norm(best - x) <= radius * (1.0 + 1e-9), "left the threat ball"
    return best


def evade_binary(
    oracle: ClassScoreOracle,
    x: np.ndarray,
    label: int,
    additions: int,
    deletions: int,
    scheme: SparseFlipNoise,
    rng: np.random.Generator,
    n_samples: int = 256,
    maximize: bool = False,
) -> np.ndarray:
    """Greedy bit flips within addition/deletion budgets.

    One flip per round, chosen by the estimated smooth score of
    ``label``; stops early when no feasible flip improves on staying put.
    """
    clean = np.asarray(x).astype(np.int8)
    x = clean.copy()
    objective = _smooth_objective(oracle, label, scheme, n_samples, rng)
    sign = -1.0 if maximize else 1.0
    adds_left, dels_left = additions, deletions
    current_value = sign * objective(x[None, :])[0]
    while adds_left > 0 or dels_left > 0:
        feasible = np.nonzero((x == 0) if dels_left == 0 else
                              (x == 1) if adds_left == 0 else
                              np.ones_like(x, dtype=bool))[0]
        if feasible.size == 0:
            break
        flipped = np.repeat(x[None, :], feasible.size, axis=0)
        flipped[np.arange(feasible.size), feasible] = 1 - flipped[
            np.arange(feasible.size), feasible
        ]
        values = sign * objective(flipped)
        j = int(np.argmin(values))
        if values[j] >= current_value:
            break
        current_value = values[j]
        bit = feasible[j]
        if x[bit] == 0:
            adds_left -= 1
        else:
            dels_left -= 1
        x = flipped[j]
    assert int(np.sum((clean == 0) & (x == 1))) <= additions, "addition budget"
    assert int(np.sum((clean == 1) & (x == 0))) <= deletions, "deletion budget"
    return x


def _clamped_budget(budget: int, n: int) -> int:
    if budget > n:
        warnings.warn(
            f"poisoning budget {budget} exceeds calibration size {n}; clamping",
            stacklevel=3,
        )
        return n
    return budget


def poison_labels_attack(
    score_matrix: np.ndarray, labels: np.ndarray, budget: int, alpha: float
) -> tuple[np.ndarray, PoisonWitness]:
    """Flip up to ``budget`` labels to maximize the calibration quantile."""
    budget = _clamped_budget(budget, len(np.asarray(labels)))
    result = worst_case_label_quantile(score_matrix, labels, budget, alpha)
    flipped = np.asarray(labels, dtype=int).copy()
    assert result.witness.labels is not None
    for i, c in zip(result.witness.indices, result.witness.labels):
        flipped[i] = c
    return flipped, result.witness


def poison_features_attack(
    oracle: ClassScoreOracle,
    inputs: np.ndarray,
    labels: np.ndarray,
    table: CalibrationTable,
    budget: int,
    alpha: float,
    config: EvasionConfig,
    seed: int,
    n_samples: int = 256,
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Perturb up to ``budget`` calibration points to inflate the quantile.

    Points are selected by the exact rank search using each point's
    certified score ceiling, then individually perturbed with the
    evasion search run in maximize mode.
    """
    budget = _clamped_budget(budget, len(table))
    ceilings = np.array(
        [
            bound_for_clean(d, config.model, config.scheme, "upper", "mean")
            for d in table.distributions
        ]
    )
    result = worst_case_feature_quantile(table.smooth_means, ceilings, budget, alpha)
    poisoned = np.array(inputs, copy=True)
    if isinstance(config.model, L2Ball):
        poisoned = poisoned.astype(float)
    for i in result.witness.indices:
        rng = substream(seed, "poison-attack", int(table.point_ids[i]))
        if isinstance(config.model, L2Ball):
            poisoned[i] = evade_l2(
                oracle, inputs[i], int(labels[i]), config.model.radius,
                config.scheme, rng, n_samples=n_samples, maximize=True,
            )
        elif isinstance(config.model, BinaryBall):
            poisoned[i] = evade_binary(
                oracle, inputs[i], int(labels[i]), config.model.additions,
                config.model.deletions, config.scheme, rng,
                n_samples=n_samples, maximize=True,
            )
        else:
            raise TypeError(f"unknown threat model: {config.model!r}")
    return poisoned, result.witness.indices
