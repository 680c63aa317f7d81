"""Independent oracles for the optimality and privacy of label randomizers.

``brute_force_optimum`` scores every nonempty label subset, so it does not
rely on the fact that only top-mass subsets matter. ``verify_dp`` works on
any square conditional table, not just the ones built in ``mechanisms``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np

from labelrand import mechanisms
from labelrand.errors import EnumerationLimitError, InputDomainError

DEFAULT_K_LIMIT = 20
OPTIMALITY_ATOL = 1e-12
DP_RTOL = 1e-9


@dataclass(frozen=True)
class SubsetScore:
    subset: tuple
    score: float


@functools.lru_cache(maxsize=None)
def _subset_table(K: int):
    """All nonempty subsets of range(K) in lexicographic order, as a 0/1 matrix."""
    subsets = [
        combo
        for size in range(1, K + 1)
        for combo in itertools.combinations(range(K), size)
    ]
    subsets.sort()
    member = np.zeros((len(subsets), K))
    for row, combo in enumerate(subsets):
        member[row, list(combo)] = 1.0
    member.setflags(write=False)
    return tuple(subsets), member


def subset_score(prior, subset, eps: float) -> float:
    """Keep rate of RR restricted to ``subset`` when inputs follow ``prior``."""
    p = np.asarray(prior, dtype=float)
    size = len(subset)
    return math.exp(eps) / (math.exp(eps) + size - 1) * float(p[list(subset)].sum())


def brute_force_optimum(prior, eps, K_limit: int = DEFAULT_K_LIMIT) -> SubsetScore:
    """Maximizes the subset score over all ``2^K - 1`` nonempty subsets.

    Ties go to the lexicographically smallest subset.
    """
    p = mechanisms.check_prior(prior)
    e = mechanisms.as_epsilon(eps)
    K = p.size
    if K > K_limit:
        raise EnumerationLimitError(f"K={K} exceeds enumeration limit {K_limit}")
    subsets, member = _subset_table(K)
    sizes = member.sum(axis=1)
    scores = math.exp(e) / (math.exp(e) + sizes - 1) * (member @ p)
    best = int(np.argmax(scores))
    return SubsetScore(subset=subsets[best], score=float(scores[best]))


def is_top_mass_subset(prior, subset, atol: float = OPTIMALITY_ATOL) -> bool:
    """True when ``subset`` carries as much prior mass as any subset of its size."""
    p = np.sort(np.asarray(prior, dtype=float))[::-1]
    top = p[: len(subset)].sum()
    return abs(float(np.asarray(prior)[list(subset)].sum()) - top) <= atol


def verify_rrp_optimal(prior, eps, K_limit: int = DEFAULT_K_LIMIT) -> bool:
    """Checks that RRWithPrior attains the brute-force optimal keep rate."""
    pmf = mechanisms.mechanism_pmf("with-prior", eps, prior=prior)
    achieved = mechanisms.objective(prior, pmf)
    best = brute_force_optimum(prior, eps, K_limit)
    if not is_top_mass_subset(prior, best.subset):
        return False
    return abs(achieved - best.score) <= OPTIMALITY_ATOL


def worst_ratio(pmf) -> float:
    """Largest ``q[y, j] / q[y', j]`` over outputs ``j`` and input pairs.

    ``0/0`` counts as 1 and ``x/0`` for ``x > 0`` as infinity.
    """
    q = np.asarray(pmf, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise InputDomainError(f"pmf must be square, got shape {q.shape}")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise InputDomainError("pmf entries must be finite and nonnegative")
    hi = q.max(axis=0)
    lo = q.min(axis=0)
    if np.any((lo == 0) & (hi > 0)):
        return math.inf
    live = hi > 0
    if not np.any(live):
        return 1.0
    return float(np.max(hi[live] / lo[live]))


def verify_dp(pmf, eps) -> tuple:
    """Returns ``(ok, worst_ratio)`` for a pure ``eps``-DP claim on ``pmf``."""
    e = mechanisms.as_epsilon(eps)
    ratio = worst_ratio(pmf)
    return ratio <= math.exp(e) * (1.0 + DP_RTOL), ratio
