"""Per-example priors: uniform, temperature-scaled model outputs, and
noisy cluster histograms.

The cluster-histogram route clusters public features with k-means, counts
labels per cluster, perturbs every bin with discrete Laplace noise and
normalizes the clipped counts. Changing one example's label moves two bins
of one histogram by one each (L1 sensitivity 2), so noise with parameter
``eps_p / 2`` per bin makes the release ``eps_p``-label-DP. Clusters are
disjoint, so the budget is spent once for the whole partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from labelrand.errors import InputDomainError, ParameterError
from labelrand.mechanisms import LabelSpace, PrivacyBudget


@dataclass(frozen=True)
class FeatureMatrix:
    rows: np.ndarray
    ids: tuple

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[1] < 1:
            raise InputDomainError(f"features must be an n x d matrix with d >= 1, got {rows.shape}")
        if len(self.ids) != rows.shape[0]:
            raise InputDomainError("one id is required per feature row")
        if len(set(self.ids)) != len(self.ids):
            raise InputDomainError("feature ids must be unique")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "ids", tuple(self.ids))

    @classmethod
    def from_array(cls, rows) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=float)
        return cls(rows, tuple(range(rows.shape[0])))


@dataclass
class Clustering:
    assignment: np.ndarray
    centroids: np.ndarray
    distortions: list = field(default_factory=list)
    n_iter: int = 0


@dataclass
class NoisyHistogram:
    counts: np.ndarray
    prior: np.ndarray


def uniform_priors(n: int, K: int) -> np.ndarray:
    """``n`` uniform priors over ``K`` labels, as an ``(n, K)`` array."""
    K = LabelSpace(K).K
    if n < 0:
        raise ParameterError(f"n must be >= 0, got {n}")
    return np.full((n, K), 1.0 / K)


def temperature_scale(logits, temperature: float) -> np.ndarray:
    """Softmax of ``logits / temperature`` along the last axis."""
    if not temperature > 0 or math.isinf(temperature):
        raise ParameterError(f"temperature must be positive and finite, got {temperature!r}")
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InputDomainError("logits must be finite")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        - 2.0 * x @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((C, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for c in range(1, C):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers[c] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[c : c + 1])[:, 0])
    return centers


def kmeans(features, C: int, rng: np.random.Generator, max_iters: int = 100) -> Clustering:
    """Lloyd's algorithm with k-means++ seeding.

    Stops after ``max_iters`` rounds or once assignments stop changing. A
    cluster that loses all its points is re-seeded at the point farthest from
    its current centroid.
    """
    x = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] < 1:
        raise InputDomainError(f"features must be an n x d matrix, got shape {x.shape}")
    n = x.shape[0]
    if int(C) != C or C < 1:
        raise ParameterError(f"cluster count must be a positive integer, got {C!r}")
    if C > n:
        raise ParameterError(f"cluster count C={C} exceeds number of points n={n}")

    centroids = _kmeans_pp(x, C, rng)
    assignment = np.full(n, -1)
    distortions = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(x, centroids)
        new_assignment = np.argmin(d2, axis=1)
        distortions.append(float(d2[np.arange(n), new_assignment].sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        counts = np.bincount(assignment, minlength=C)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignment, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for c in np.flatnonzero(~nonempty):
            point_d2 = np.sum((x - centroids[assignment]) ** 2, axis=1)
            far = int(np.argmax(point_d2))
            centroids[c] = x[far]
            assignment[far] = c
    return Clustering(assignment=assignment, centroids=centroids, distortions=distortions, n_iter=it)


def discrete_laplace_pmf(z, a: float) -> np.ndarray:
    """``Pr[Z = z] = tanh(a/2) * exp(-a |z|)``."""
    _check_scale(a)
    return math.tanh(a / 2.0) * np.exp(-a * np.abs(np.asarray(z, dtype=float)))


def discrete_laplace_logpmf(z, a: float) -> np.ndarray:
    _check_scale(a)
    return math.log(math.tanh(a / 2.0)) - a * np.abs(np.asarray(z, dtype=float))


def _check_scale(a: float) -> None:
    if not a > 0 or math.isinf(a):
        raise ParameterError(f"discrete Laplace parameter must be positive and finite, got {a!r}")


def discrete_laplace(a: float, rng: np.random.Generator, size=None):
    """Draws discrete Laplace noise as the difference of two geometric variables."""
    _check_scale(a)
    # numpy's geometric counts trials to first success (support >= 1).
    success = -math.expm1(-a)
    g1 = rng.geometric(success, size=size) - 1
    g2 = rng.geometric(success, size=size) - 1
    out = g1 - g2
    return int(out) if size is None else out.astype(np.int64)


def normalize_histogram(noisy_counts) -> np.ndarray:
    """Clips at zero and normalizes; all-zero histograms become uniform."""
    h = np.maximum(np.asarray(noisy_counts, dtype=float), 0.0)
    total = h.sum()
    if total == 0:
        return np.full(h.shape, 1.0 / h.size)
    return h / total


def noisy_histogram(counts, eps_p: float, rng: np.random.Generator) -> NoisyHistogram:
    counts = np.asarray(counts, dtype=np.int64)
    noisy = counts + discrete_laplace(eps_p / 2.0, rng, size=counts.shape)
    return NoisyHistogram(counts=noisy, prior=normalize_histogram(noisy))


def noisy_histogram_logpmf(noisy_counts, true_counts, eps_p: float) -> float:
    """Exact log-probability of releasing ``noisy_counts`` given ``true_counts``."""
    diff = np.asarray(noisy_counts) - np.asarray(true_counts)
    return float(np.sum(discrete_laplace_logpmf(diff, eps_p / 2.0)))


def cluster_histogram_priors(
    features,
    labels,
    C: int,
    eps_p,
    rng: np.random.Generator,
    num_classes: Optional[int] = None,
    max_iters: int = 100,
):
    """Builds one private prior per cluster and assigns it to every member.

    Returns:
      ``(priors, spent, details)`` where ``priors`` is an ``(n, K)`` array,
      ``spent`` the PrivacyBudget consumed and ``details`` a dict holding the
      clustering and the per-cluster noisy histograms.
    """
    x = features.rows if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    budget = eps_p if isinstance(eps_p, PrivacyBudget) else PrivacyBudget(float(eps_p))
    if not budget.epsilon > 0 or not budget.pure:
        raise ParameterError("prior budget needs epsilon > 0 and delta = 0")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != x.shape[0]:
        raise InputDomainError(
            f"labels ({labels.shape[0] if labels.ndim else 0}) not aligned with features ({x.shape[0]})"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    space = LabelSpace(num_classes)
    for y in labels:
        space.check(y)

    clustering = kmeans(x, C, rng, max_iters=max_iters)
    histograms = []
    cluster_priors = np.empty((C, space.K))
    for c in range(C):
        counts = np.bincount(labels[clustering.assignment == c].astype(int), minlength=space.K)
        hist = noisy_histogram(counts, budget.epsilon, rng)
        histograms.append(hist)
        cluster_priors[c] = hist.prior
    priors = cluster_priors[clustering.assignment]
    return priors, budget, {"clustering": clustering, "histograms": histograms}
