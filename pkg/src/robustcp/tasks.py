"""Synthetic classification tasks with closed-form classifiers.

Both task families admit an exact Bayes posterior that is softmax-linear
in the features, so no model training is involved anywhere: the
"classifier" is the posterior itself, evaluated in closed form.  Fresh
calibration/test splits are i.i.d. draws, which keeps conformal
exchangeability exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .smoothing import substream

__all__ = [
    "GaussianMixtureTask",
    "BernoulliFeatureTask",
    "make_gaussian_mixture",
    "make_binary_task",
    "tps_oracle",
    "aps_oracle",
    "plain_score_matrix",
]


@dataclass(frozen=True)
class GaussianMixtureTask:
    """Isotropic Gaussian mixture; the Bayes posterior is softmax-linear."""

    means: np.ndarray  # (n_classes, dim)
    noise: float
    priors: np.ndarray  # (n_classes,)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.choice(self.n_classes, size=n, p=self.priors)
        x = self.means[y] + self.noise * rng.standard_normal((n, self.dim))
        return x, y

    def class_probabilities(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        scale = 1.0 / self.noise**2
        logits = scale * x @ self.means.T
        logits -= 0.5 * scale * np.sum(self.means**2, axis=1)[None, :]
        logits += np.log(self.priors)[None, :]
        return softmax(logits, axis=1)


@dataclass(frozen=True)
class BernoulliFeatureTask:
    """Independent binary features per class; the posterior is softmax-linear."""

    theta: np.ndarray  # (n_classes, dim) feature-on probabilities
    priors: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.theta.shape[0]

    @property
    def dim(self) -> int:
        return self.theta.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.choice(self.n_classes, size=n, p=self.priors)
        x = (rng.random((n, self.dim)) < self.theta[y]).astype(np.int8)
        return x, y

    def class_probabilities(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        on = np.log(self.theta)
        off = np.log1p(-self.theta)
        logits = x @ (on - off).T + off.sum(axis=1)[None, :]
        logits += np.log(self.priors)[None, :]
        return softmax(logits, axis=1)


SyntheticTask = GaussianMixtureTask | BernoulliFeatureTask


def make_gaussian_mixture(
    n_classes: int = 3,
    dim: int = 4,
    separation: float = 1.0,
    noise: float = 1.0,
    seed: int = 0,
) -> GaussianMixtureTask:
    """Class means at distance ``separation`` from the origin in random directions."""
    if not 2 <= n_classes <= 10 or not 1 <= dim <= 16:
        raise ValueError("supported sizes: 2-10 classes, 1-16 dimensions")
    rng = substream(seed, "task", "gaussian-means")
    means = rng.standard_normal((n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    priors = np.full(n_classes, 1.0 / n_classes)
    return GaussianMixtureTask(means=means, noise=noise, priors=priors)


def make_binary_task(
    n_classes: int = 3,
    dim: int = 64,
    strength: float = 0.25,
    seed: int = 0,
) -> BernoulliFeatureTask:
    """Feature-on probabilities 0.5 +- ``strength`` with a random sign per (class, bit).

    Every bit carries the same information, so no single flip dominates
    the posterior; adversarial bit flips then matter in proportion to
    how many bits they touch.
    """
    if not 2 <= n_classes <= 10 or not 1 <= dim <= 64:
        raise ValueError("supported sizes: 2-10 classes, 1-64 dimensions")
    if not 0.0 < strength < 0.5:
        raise ValueError("strength must lie in (0, 0.5)")
    rng = substream(seed, "task", "binary-theta")
    signs = rng.choice((-1.0, 1.0), size=(n_classes, dim))
    theta = 0.5 + strength * signs
    priors = np.full(n_classes, 1.0 / n_classes)
    return BernoulliFeatureTask(theta=theta, priors=priors)


def tps_oracle(task: SyntheticTask):
    """Class-probability score oracle: (points, class, rng) -> scores."""

    def oracle(points: np.ndarray, class_index: int, rng: np.random.Generator) -> np.ndarray:
        return task.class_probabilities(points)[:, class_index]

    return oracle


def aps_oracle(task: SyntheticTask):
    """Adaptive score oracle with a fresh tie-break draw per evaluated point."""

    def oracle(points: np.ndarray, class_index: int, rng: np.random.Generator) -> np.ndarray:
        probs = task.class_probabilities(points)
        p_label = probs[:, class_index]
        mass_above = np.where(probs > p_label[:, None], probs, 0.0).sum(axis=1)
        u = rng.random(probs.shape[0])
        return 1.0 - mass_above - u * p_label

    return oracle


def plain_score_matrix(
    task: SyntheticTask, x: np.ndarray, kind: str, rng: np.random.Generator
) -> np.ndarray:
    """Unsmoothed per-class scores, one tie-break draw per point shared across classes."""
    probs = task.class_probabilities(x)
    if kind == "tps":
        return probs
    if kind != "aps":
        raise ValueError("score kind must be 'tps' or 'aps'")
    u = rng.random(probs.shape[0])
    scores = np.empty_like(probs)
    for c in range(probs.shape[1]):
        p_label = probs[:, c]
        mass_above = np.where(probs > p_label[:, None], probs, 0.0).sum(axis=1)
        scores[:, c] = 1.0 - mass_above - u * p_label
    return scores
