"""Label randomizers: classic randomized response, RRTop-k and RRWithPrior.

Every mechanism is available in two forms: a sampler that consumes a seeded
numpy generator, and an exact ``K x K`` conditional output table (row ``y``
holds ``Pr[out = j | in = y]``). Samplers draw by inverse CDF over the same
rows, so the analytic tests on the tables also cover the samplers.

Ties in prior mass are always broken towards the smaller label index, both
when forming the top-k label set and when picking ``k*``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from labelrand.errors import InputDomainError, ParameterError

PRIOR_ATOL = 1e-9

MECHANISMS = ("classic", "top-k", "with-prior")


@dataclass(frozen=True)
class LabelSpace:
    """Label alphabet ``{0, ..., K-1}``."""

    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 2:
            raise ParameterError(f"label space needs K >= 2, got {self.K!r}")

    def check(self, y) -> int:
        if isinstance(y, (bool, np.bool_)) or int(y) != y or not 0 <= y < self.K:
            raise InputDomainError(f"label {y!r} outside [0, {self.K})")
        return int(y)


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) pair; epsilon in nats, delta = 0 for pure DP."""

    epsilon: float
    delta: float = 0.0

    def __post_init__(self):
        if not (self.epsilon >= 0) or math.isinf(self.epsilon):
            raise ParameterError(f"epsilon must be finite and >= 0, got {self.epsilon!r}")
        if not 0.0 <= self.delta < 1.0:
            raise ParameterError(f"delta must lie in [0, 1), got {self.delta!r}")

    @property
    def pure(self) -> bool:
        return self.delta == 0.0


Epsilon = Union[float, PrivacyBudget]


def as_epsilon(eps: Epsilon) -> float:
    """Validates a pure-DP budget given as a float or PrivacyBudget."""
    budget = eps if isinstance(eps, PrivacyBudget) else PrivacyBudget(float(eps))
    if not budget.pure:
        raise ParameterError("label randomizers are pure DP; delta must be 0")
    return budget.epsilon


def check_prior(prior) -> np.ndarray:
    """Returns ``prior`` as a float array after checking it is a distribution."""
    p = np.asarray(prior, dtype=float)
    if p.ndim != 1 or p.size < 2:
        raise InputDomainError(f"prior must be a vector over K >= 2 labels, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputDomainError("prior entries must be finite and nonnegative")
    if abs(p.sum() - 1.0) > PRIOR_ATOL:
        raise InputDomainError(f"prior sums to {p.sum()!r}, not 1")
    return p


def label_order(prior: np.ndarray) -> np.ndarray:
    """Labels sorted by decreasing prior mass, ties to the smaller index."""
    return np.argsort(-np.asarray(prior, dtype=float), kind="stable")


def top_k_labels(prior, k: int) -> np.ndarray:
    """The ``k`` labels of largest prior mass, in rank order."""
    p = check_prior(prior)
    _check_k(k, p.size)
    return label_order(p)[:k]


def _check_k(k: int, K: int) -> None:
    if int(k) != k or not 1 <= k <= K:
        raise ParameterError(f"k must be an integer in [1, {K}], got {k!r}")


def keep_probability(eps: float, k: int) -> float:
    """``e^eps / (e^eps + k - 1)``: chance that RR over ``k`` labels keeps the input."""
    # Rewritten as 1 / (1 + (k-1) e^-eps) so large eps does not overflow.
    return 1.0 / (1.0 + (k - 1) * math.exp(-eps))


def flip_probability(eps: float, k: int) -> float:
    """``1 / (e^eps + k - 1)``: chance of each specific non-input label."""
    return math.exp(-eps) / (1.0 + (k - 1) * math.exp(-eps))


@dataclass(frozen=True)
class RrpPlan:
    """The label-independent part of RRWithPrior for one prior.

    Attributes:
      weights: ``w_k`` for ``k = 1..K`` (index ``k-1``), the expected keep rate
        of RRTop-k when the input is drawn from the prior.
      k_star: smallest maximizer of ``weights``.
      top_set: the ``k_star`` highest-prior labels in rank order.
    """

    weights: tuple
    k_star: int
    top_set: tuple

    @property
    def best_weight(self) -> float:
        return self.weights[self.k_star - 1]


def rrp_plan(prior, eps: Epsilon) -> RrpPlan:
    """Computes the top-k weights and ``k*`` of RRWithPrior."""
    p = check_prior(prior)
    e = as_epsilon(eps)
    order = label_order(p)
    mass = np.cumsum(p[order])
    ks = np.arange(1, p.size + 1)
    weights = mass / (1.0 + (ks - 1) * math.exp(-e))
    k_star = int(np.argmax(weights)) + 1  # argmax returns the first maximizer
    return RrpPlan(
        weights=tuple(float(w) for w in weights),
        k_star=k_star,
        top_set=tuple(int(i) for i in order[:k_star]),
    )


def top_k_table(prior, k: int, eps: Epsilon) -> np.ndarray:
    """Exact output table of RRTop-k."""
    p = check_prior(prior)
    e = as_epsilon(eps)
    K = p.size
    _check_k(k, K)
    members = label_order(p)[:k]
    table = np.zeros((K, K))
    # Inputs outside the top set map uniformly into it.
    table[:, members] = 1.0 / k
    keep, flip = keep_probability(e, k), flip_probability(e, k)
    for y in members:
        table[y, members] = flip
        table[y, y] = keep
    return table


def classic_table(K: int, eps: Epsilon) -> np.ndarray:
    """Exact output table of K-ary randomized response."""
    K = LabelSpace(K).K
    e = as_epsilon(eps)
    table = np.full((K, K), flip_probability(e, K))
    np.fill_diagonal(table, keep_probability(e, K))
    return table


def mechanism_pmf(
    mechanism: str,
    eps: Epsilon,
    prior=None,
    k: Optional[int] = None,
    num_classes: Optional[int] = None,
) -> np.ndarray:
    """Returns the ``K x K`` conditional output table of a mechanism.

    Args:
      mechanism: one of ``"classic"``, ``"top-k"`` or ``"with-prior"``.
      eps: privacy parameter.
      prior: prior vector; required for ``top-k`` and ``with-prior``.
      k: top set size; required for ``top-k``.
      num_classes: label count for ``classic`` when no prior is given.
    """
    if mechanism == "classic":
        if num_classes is None:
            if prior is None:
                raise ParameterError("classic mechanism needs num_classes or a prior")
            num_classes = check_prior(prior).size
        return classic_table(num_classes, eps)
    if prior is None:
        raise ParameterError(f"mechanism {mechanism!r} needs a prior")
    if mechanism == "top-k":
        if k is None:
            raise ParameterError("top-k mechanism needs k")
        return top_k_table(prior, k, eps)
    if mechanism == "with-prior":
        return top_k_table(prior, rrp_plan(prior, eps).k_star, eps)
    raise ParameterError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")


def objective(prior, pmf) -> float:
    """Probability that the mechanism returns the input when it is drawn from ``prior``."""
    p = check_prior(prior)
    q = np.asarray(pmf, dtype=float)
    if q.shape != (p.size, p.size):
        raise InputDomainError(f"pmf shape {q.shape} does not match K={p.size}")
    return float(np.dot(p, np.diag(q)))


def inverse_cdf(row: np.ndarray, u: float) -> int:
    """Maps a uniform variate ``u`` in [0, 1) to an index drawn from ``row``."""
    cdf = np.cumsum(row)
    idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    # Guard against u*total landing on the final cumulative value.
    idx = min(idx, row.size - 1)
    while row[idx] == 0.0:
        idx -= 1
    return idx


def sample_rows(table: np.ndarray, labels, rng: np.random.Generator) -> np.ndarray:
    """Vectorized inverse-CDF sampling of ``table[labels[i]]`` for every ``i``."""
    labels = np.asarray(labels, dtype=int)
    u = rng.random(labels.shape)
    return sample_rows_with_uniforms(table, labels, u)


def sample_rows_with_uniforms(table: np.ndarray, labels, u) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    cdf = np.cumsum(table[labels], axis=-1)
    scaled = np.asarray(u)[..., None] * cdf[..., -1:]
    out = (cdf <= scaled).sum(axis=-1)
    out = np.minimum(out, table.shape[1] - 1)
    # Step back over trailing zero-probability columns hit by rounding.
    rows = table[labels]
    bad = np.take_along_axis(rows, out[..., None], axis=-1)[..., 0] == 0.0
    while np.any(bad):
        out = np.where(bad, out - 1, out)
        bad = np.take_along_axis(rows, out[..., None], axis=-1)[..., 0] == 0.0
    return out


def rr_classic(y: int, K: int, eps: Epsilon, rng: np.random.Generator) -> int:
    """Classic K-ary randomized response on a single label."""
    y = LabelSpace(K).check(y)
    return inverse_cdf(classic_table(K, eps)[y], rng.random())


def rr_top_k(y: int, prior, k: int, eps: Epsilon, rng: np.random.Generator) -> int:
    """RRTop-k on a single label."""
    table = top_k_table(prior, k, eps)
    y = LabelSpace(table.shape[0]).check(y)
    return inverse_cdf(table[y], rng.random())


def rr_with_prior(y: int, prior, eps: Epsilon, rng: np.random.Generator) -> int:
    """RRWithPrior on a single label: RRTop-k with the prior's ``k*``."""
    return rr_top_k(y, prior, rrp_plan(prior, eps).k_star, eps, rng)
