"""Randomized smoothing of conformity scores.

A smoothing scheme perturbs an input with random noise; the smooth score
is the expectation of a base score under that noise.  Expectations are
estimated by Monte Carlo and summarized as a :class:`ScoreDistribution`
(mean, variance, and the empirical CDF on a fixed bin grid), which is
all the certification routines in :mod:`robustcp.bounds` consume.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GaussianNoise",
    "SparseFlipNoise",
    "BinGrid",
    "ScoreDistribution",
    "substream",
    "subseed",
    "sample_gaussian",
    "sample_sparse",
    "estimate_distribution",
    "distribution_from_samples",
]

# Batch score oracle: maps an (m, d) array of perturbed inputs to m
# scores in [0, 1].  The generator argument feeds randomized scores
# (e.g. a fresh tie-break draw per noisy sample); deterministic oracles
# ignore it.
ScoreOracle = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class GaussianNoise:
    """Isotropic Gaussian noise with scale ``sigma`` on continuous inputs."""

    sigma: float

    def __post_init__(self) -> None:
        if not self.sigma > 0.0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class SparseFlipNoise:
    """Independent bit flips on binary inputs.

    Zeros flip to one with probability ``p0``, ones flip to zero with
    probability ``p1``.
    """

    p0: float
    p1: float

    def __post_init__(self) -> None:
        for name, p in (("p0", self.p0), ("p1", self.p1)):
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")


SmoothingScheme = GaussianNoise | SparseFlipNoise


def _seed_sequence(seed: int, path: tuple[int | str, ...]) -> np.random.SeedSequence:
    parts: list[int] = [int(seed)]
    for p in path:
        if isinstance(p, str):
            parts.append(int.from_bytes(p.encode("utf8"), "big") % (2**63))
        else:
            parts.append(int(p))
    return np.random.SeedSequence(entropy=tuple(parts))


def substream(seed: int, *path: int | str) -> np.random.Generator:
    """Independent counter-based generator for a (seed, path) address.

    Streams are keyed by value, not by call order, so estimating a batch
    in any order (or in parallel workers) yields identical draws.  Path
    components may be ints or short strings; strings are folded to ints.
    """
    return np.random.Generator(np.random.Philox(_seed_sequence(seed, path)))


def subseed(seed: int, *path: int | str) -> int:
    """Derived integer seed for the same address space as :func:`substream`.

    Use when an API wants a seed rather than a generator, e.g. to give
    each trial of an experiment its own independent seed.
    """
    return int(_seed_sequence(seed, path).generate_state(1, dtype=np.uint64)[0] % 2**63)


def sample_gaussian(
    x: np.ndarray, sigma: float, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n_samples`` Gaussian perturbations of ``x``, shape (n_samples, d)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be a 1-d feature vector")
    return x[None, :] + sigma * rng.standard_normal((n_samples, x.size))


def sample_sparse(
    x: np.ndarray, p0: float, p1: float, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw ``n_samples`` bit-flip perturbations of a binary vector ``x``."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("x must be a 1-d feature vector")
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("sparse smoothing requires binary features")
    x = x.astype(np.int8)
    flip_prob = np.where(x == 1, p1, p0)
    flips = rng.random((n_samples, x.size)) < flip_prob[None, :]
    return np.where(flips, 1 - x[None, :], x[None, :]).astype(np.int8)


@dataclass(frozen=True)
class BinGrid:
    """Nondecreasing bin edges spanning [0, 1] for binned-CDF summaries.

    The first and last pairs of edges must be strictly increasing; the
    CDF is recorded at the interior edges only (the endpoints are pinned
    to 0 and 1 by the score range).
    """

    edges: np.ndarray

    def __post_init__(self) -> None:
        edges = np.asarray(self.edges, dtype=float)
        object.__setattr__(self, "edges", edges)
        if edges.ndim != 1 or edges.size < 3:
            raise ValueError("grid needs at least 3 edges")
        if edges[0] != 0.0 or edges[-1] != 1.0:
            raise ValueError("grid must span [0, 1]")
        if np.any(np.diff(edges) < 0):
            raise ValueError("grid edges must be nondecreasing")
        if not (edges[0] < edges[1] and edges[-2] < edges[-1]):
            raise ValueError("first and last edge pairs must be strictly increasing")

    @classmethod
    def uniform(cls, n_edges: int = 51) -> "BinGrid":
        return cls(edges=np.linspace(0.0, 1.0, n_edges))

    @property
    def inner_edges(self) -> np.ndarray:
        return self.edges[1:-1]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BinGrid) and np.array_equal(self.edges, other.edges)

    def __hash__(self) -> int:
        return hash(self.edges.tobytes())


@dataclass(frozen=True)
class ScoreDistribution:
    """Monte-Carlo summary of a smooth score.

    Attributes
    ----------
    n_samples : int
        Number of Monte-Carlo draws (at least 2).
    mean : float
        Sample mean, in [0, 1].
    variance : float
        Unbiased sample variance.
    grid : BinGrid
        Bin edges the CDF is recorded on.
    cdf : np.ndarray
        Fraction of samples <= each interior edge; nondecreasing.
    """

    n_samples: int
    mean: float
    variance: float
    grid: BinGrid
    cdf: np.ndarray

    def __post_init__(self) -> None:
        cdf = np.asarray(self.cdf, dtype=float)
        object.__setattr__(self, "cdf", cdf)
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples")
        if not 0.0 <= self.mean <= 1.0:
            raise ValueError("mean must lie in [0, 1]")
        # Unbiased variance of a [0, 1] variable is at most m / (4 (m-1)).
        cap = 0.25 * self.n_samples / (self.n_samples - 1)
        if not 0.0 <= self.variance <= cap + 1e-12:
            raise ValueError("variance outside the feasible range for [0, 1] scores")
        if cdf.size != self.grid.inner_edges.size:
            raise ValueError("cdf must have one value per interior grid edge")
        if np.any(cdf < 0.0) or np.any(cdf > 1.0) or np.any(np.diff(cdf) < -1e-12):
            raise ValueError("cdf values must be nondecreasing within [0, 1]")


def distribution_from_samples(
    samples: Sequence[float] | np.ndarray, grid: BinGrid
) -> ScoreDistribution:
    """Summarize raw smooth-score samples on ``grid``.

    Scores within 1e-9 of the [0, 1] boundary are clipped; anything
    farther out is a contract violation.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 1 or samples.size < 2:
        raise ValueError("need a 1-d array of at least 2 samples")
    if np.any(samples < -1e-9) or np.any(samples > 1.0 + 1e-9):
        raise ValueError("score oracle produced values outside [0, 1]")
    samples = np.clip(samples, 0.0, 1.0)
    m = samples.size
    cdf = np.searchsorted(np.sort(samples), grid.inner_edges, side="right") / m
    return ScoreDistribution(
        n_samples=m,
        mean=float(samples.mean()),
        variance=float(samples.var(ddof=1)),
        grid=grid,
        cdf=cdf,
    )


def estimate_distribution(
    score_fn: ScoreOracle,
    x: np.ndarray,
    scheme: SmoothingScheme,
    n_samples: int,
    grid: BinGrid,
    rng: np.random.Generator,
) -> ScoreDistribution:
    """Monte-Carlo estimate of the smooth score distribution at ``x``.

    Parameters
    ----------
    score_fn : callable
        Batch oracle ``(points, rng) -> scores`` with scores in [0, 1].
    x : array of shape (d,)
        Input the noise is centred on.
    scheme : GaussianNoise or SparseFlipNoise
        Noise distribution ``x`` is perturbed with.
    n_samples : int
        Monte-Carlo sample count (>= 2).
    grid : BinGrid
        Edges for the binned CDF.
    rng : np.random.Generator
        Source for both the noise and any randomness inside the oracle;
        pass a :func:`substream` keyed by (point, class) for
        reproducible, order-independent batches.
    """
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    if isinstance(scheme, GaussianNoise):
        noisy = sample_gaussian(x, scheme.sigma, n_samples, rng)
    elif isinstance(scheme, SparseFlipNoise):
        noisy = sample_sparse(x, scheme.p0, scheme.p1, n_samples, rng)
    else:
        raise TypeError(f"unknown smoothing scheme: {scheme!r}")
    scores = np.asarray(score_fn(noisy, rng), dtype=float)
    if scores.shape != (n_samples,):
        raise ValueError("score oracle must return one score per sample")
    return distribution_from_samples(scores, grid)
