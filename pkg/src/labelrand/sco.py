"""Label-private stochastic convex optimization.

Two single-pass projected SGD variants over a Euclidean ball:

* ``label_rr_sgd`` randomizes each label once with randomized response and
  steps along a debiased gradient whose expectation over the randomizer is
  the clean-label gradient.
* ``label_normal_sgd`` keeps the true label but adds Gaussian noise projected
  onto the span of the per-label gradients at the current point.

Also provides the debiased loss and two synthetic problems: the signed
linear loss over basis vectors, and a softmax regression problem on
Gaussian blobs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from labelrand import mechanisms
from labelrand.errors import InputDomainError, ParameterError, TrainingDivergenceError

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass
class ScoProblem:
    """A convex, L-Lipschitz loss over the ball of diameter ``D`` in R^p.

    ``loss(w, x, y)`` and ``grad(w, x, y)`` take one example; labels are
    ``0..K-1``. ``sample(rng, n)`` returns ``(X, y)`` drawn from the data
    distribution. ``population_risk`` and ``optimal_risk`` are filled in when
    the population risk has a closed form.
    """

    dim: int
    diameter: float
    lipschitz: float
    num_classes: int
    loss: Callable
    grad: Callable
    sample: Callable
    population_risk: Optional[Callable] = None
    optimal_risk: Optional[float] = None
    name: str = ""

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    def project(self, w: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(w)
        if norm > self.radius:
            return w * (self.radius / norm)
        return w

    def label_gradients(self, w, x, support: Sequence[int]) -> np.ndarray:
        return np.stack([self.grad(w, x, k) for k in support])


def check_problem(problem: ScoProblem, rng: np.random.Generator, probes: int = 20,
                  fd_step: float = 1e-6, fd_rtol: float = 1e-5) -> None:
    """Checks Lipschitzness and gradients against central finite differences.

    Raises:
      ParameterError: on the first failed probe.
    """
    X, y = problem.sample(rng, probes)
    for i in range(probes):
        w1 = problem.project(rng.normal(size=problem.dim) * problem.radius)
        w2 = problem.project(rng.normal(size=problem.dim) * problem.radius)
        gap = abs(problem.loss(w1, X[i], y[i]) - problem.loss(w2, X[i], y[i]))
        if gap > problem.lipschitz * np.linalg.norm(w1 - w2) * (1 + 1e-9) + 1e-12:
            raise ParameterError(f"{problem.name or 'problem'}: Lipschitz bound violated on probe {i}")
        g = problem.grad(w1, X[i], y[i])
        fd = np.empty(problem.dim)
        for j in range(problem.dim):
            step = np.zeros(problem.dim)
            step[j] = fd_step
            fd[j] = (problem.loss(w1 + step, X[i], y[i]) - problem.loss(w1 - step, X[i], y[i])) / (2 * fd_step)
        scale = max(np.linalg.norm(g), 1.0)
        if np.linalg.norm(g - fd) > fd_rtol * scale:
            raise ParameterError(f"{problem.name or 'problem'}: gradient mismatch on probe {i}")


@dataclass(frozen=True)
class DebiasCoefficients:
    """Constants of the debiasing correction for RR over ``k`` labels."""

    scale: float  # (e^eps + k - 1) / (e^eps - 1)
    p_k_eps: float  # 1 / (e^eps + k - 1)
    k: int

    @classmethod
    def of(cls, eps, k: int) -> "DebiasCoefficients":
        e = mechanisms.as_epsilon(eps)
        if not e > 0:
            raise ParameterError("debiasing is undefined at epsilon = 0")
        if k < 1:
            raise ParameterError("support must be nonempty")
        # (e^eps + k - 1)/(e^eps - 1) = (1 + (k-1)e^-eps) / (1 - e^-eps)
        scale = (1.0 + (k - 1) * math.exp(-e)) / -math.expm1(-e)
        return cls(scale=scale, p_k_eps=mechanisms.flip_probability(e, k), k=k)


def _check_support(y_tilde: int, support: Sequence[int]) -> list:
    support = [int(s) for s in support]
    if int(y_tilde) not in support:
        raise InputDomainError(f"label {y_tilde} is not in the support {support}")
    return support


def debiased_gradient(w, x, y_tilde: int, support: Sequence[int], eps, problem: ScoProblem) -> np.ndarray:
    """Unbiased gradient estimate from a label randomized by RR over ``support``."""
    support = _check_support(y_tilde, support)
    coef = DebiasCoefficients.of(eps, len(support))
    per_label = problem.label_gradients(w, x, support)
    g = per_label[support.index(int(y_tilde))]
    return coef.scale * (g - coef.p_k_eps * per_label.sum(axis=0))


def debiased_loss(loss: Callable, t, x, y: int, support: Sequence[int], eps) -> float:
    """Debiased loss whose expectation under RR over ``support`` is ``loss(t, x, y)``.

    ``loss(t, x, y)`` is evaluated at every label of ``support``.
    """
    support = _check_support(y, support)
    e = mechanisms.as_epsilon(eps)
    if not e > 0:
        raise ParameterError("debiased loss is degenerate at epsilon = 0 (k * p_k_eps = 1)")
    k = len(support)
    p = mechanisms.flip_probability(e, k)
    # 1 - k p = (e^eps - 1) / (e^eps + k - 1)
    denom = -math.expm1(-e) / (1.0 + (k - 1) * math.exp(-e))
    correction = sum(loss(t, x, yy) for yy in support)
    return (loss(t, x, y) - p * correction) / denom


@dataclass(frozen=True)
class StepSchedule:
    """``eta_t = base / sqrt(t)`` for ``t >= 1``."""

    base: float

    def __call__(self, t: int) -> float:
        return self.base / math.sqrt(t)

    @classmethod
    def rr_sgd(cls, problem: ScoProblem, eps: float, k: Optional[int] = None) -> "StepSchedule":
        """``D / (G sqrt(t))`` with ``G = 6 K L / eps``."""
        k = problem.num_classes if k is None else k
        G = 6.0 * k * problem.lipschitz / eps
        return cls(problem.diameter / G)

    @classmethod
    def normal_sgd(cls, problem: ScoProblem, sigma: float, k: Optional[int] = None) -> "StepSchedule":
        """``D / sqrt((L^2 + K sigma^2) t)``."""
        k = problem.num_classes if k is None else k
        return cls(problem.diameter / math.sqrt(problem.lipschitz ** 2 + k * sigma ** 2))


@dataclass
class SgdRun:
    w: np.ndarray
    steps: int
    mean_noise_sq: float = float("nan")
    sigma: float = float("nan")


def _check_finite(w: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(w)):
        raise TrainingDivergenceError(f"parameters became non-finite at step {t}")


def label_rr_sgd(
    problem: ScoProblem,
    n: int,
    eps,
    rng: np.random.Generator,
    schedule: Optional[StepSchedule] = None,
    prior_map: Optional[Callable] = None,
    w0=None,
    debias: bool = True,
) -> SgdRun:
    """Single-pass SGD on labels randomized once each by randomized response.

    Args:
      problem: the convex problem; fresh samples come from ``problem.sample``.
      n: number of samples (and steps).
      eps: label privacy budget.
      rng: generator for samples and label randomization.
      schedule: step sizes; default ``D / (G sqrt(t))`` with ``G = 6KL/eps``.
      prior_map: optional ``x -> (prior, k)``. The support becomes the top-k
        labels of the prior; a label outside it is replaced by a uniform
        member before randomization.
      w0: starting point (default origin).
      debias: use the debiased gradient; ``False`` steps on the raw gradient
        of the randomized label, for comparison only.
    """
    e = mechanisms.as_epsilon(eps)
    if not e > 0:
        raise ParameterError("label_rr_sgd needs epsilon > 0")
    if e > 1:
        logger.warning("epsilon=%.3g > 1; the step-size analysis assumes epsilon <= 1", e)
    if n < 0:
        raise ParameterError("n must be >= 0")
    K = problem.num_classes
    w = np.zeros(problem.dim) if w0 is None else problem.project(np.asarray(w0, dtype=float))
    if n == 0:
        return SgdRun(w, 0)
    X, Y = problem.sample(rng, n)
    if schedule is None:
        k = prior_map(X[0])[1] if prior_map is not None else None
        schedule = StepSchedule.rr_sgd(problem, e, k)
    full = list(range(K))
    for t in range(1, n + 1):
        x, y = X[t - 1], int(Y[t - 1])
        if prior_map is None:
            support = full
        else:
            prior, k = prior_map(x)
            support = [int(s) for s in mechanisms.top_k_labels(prior, k)]
            if y not in support:
                y = support[int(rng.integers(len(support)))]
        keep = mechanisms.keep_probability(e, len(support))
        if rng.random() < keep or len(support) == 1:
            y_tilde = y
        else:
            others = [s for s in support if s != y]
            y_tilde = others[int(rng.integers(len(others)))]
        if debias:
            g = debiased_gradient(w, x, y_tilde, support, e, problem)
        else:
            g = problem.grad(w, x, y_tilde)
        w = problem.project(w - schedule(t) * g)
        _check_finite(w, t)
    return SgdRun(w, n)


def gaussian_sigma(lipschitz: float, eps: float, delta: float) -> float:
    """Gaussian-mechanism noise for sensitivity ``2L``: ``2L sqrt(2 ln(1.25/delta)) / eps``."""
    if not 0 < eps < math.inf or not 0 < delta < 1:
        raise ParameterError("gaussian calibration needs eps > 0 and delta in (0, 1)")
    return 2.0 * lipschitz * math.sqrt(2.0 * math.log(1.25 / delta)) / eps


def span_basis(vectors: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis (as columns) of the span of the rows of ``vectors``."""
    A = np.asarray(vectors, dtype=float).T
    if A.size == 0:
        return np.zeros((A.shape[0], 0))
    q, r = np.linalg.qr(A)
    diag = np.abs(np.diag(r))
    scale = max(np.max(np.linalg.norm(A, axis=0)), 1.0)
    keep = diag > tol * scale
    if np.all(keep):
        return q[:, keep]
    # Column pivoting is not available in numpy's QR; fall back to SVD for
    # rank-deficient inputs so no direction is lost.
    u, s, _ = np.linalg.svd(A, full_matrices=False)
    return u[:, s > tol * max(s.max(), 1.0)]


def project_onto_span(noise: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return basis @ (basis.T @ noise)


def label_normal_sgd(
    problem: ScoProblem,
    n: int,
    eps: float,
    delta: float,
    rng: np.random.Generator,
    schedule: Optional[StepSchedule] = None,
    sigma: Optional[float] = None,
    w0=None,
) -> SgdRun:
    """Single-pass SGD with Gaussian noise restricted to the per-label gradient span.

    ``sigma`` overrides the calibrated noise level (tests only).
    """
    if not (eps > 0 and 0 < delta < 1):
        raise ParameterError("label_normal_sgd needs eps > 0 and delta in (0, 1)")
    if eps >= 1:
        logger.warning("eps=%.3g >= 1; the noise calibration assumes eps < 1", eps)
    if n < 0:
        raise ParameterError("n must be >= 0")
    if sigma is None:
        sigma = gaussian_sigma(problem.lipschitz, eps, delta)
    w = np.zeros(problem.dim) if w0 is None else problem.project(np.asarray(w0, dtype=float))
    if n == 0:
        return SgdRun(w, 0, 0.0, sigma)
    if schedule is None:
        schedule = StepSchedule.normal_sgd(problem, sigma)
    X, Y = problem.sample(rng, n)
    full = list(range(problem.num_classes))
    noise_sq = 0.0
    for t in range(1, n + 1):
        x, y = X[t - 1], int(Y[t - 1])
        per_label = problem.label_gradients(w, x, full)
        b = np.zeros(problem.dim)
        if sigma > 0:
            basis = span_basis(per_label)
            b = project_onto_span(rng.normal(scale=sigma, size=problem.dim), basis)
        noise_sq += float(b @ b)
        w = problem.project(w - schedule(t) * (per_label[y] + b))
        _check_finite(w, t)
    return SgdRun(w, n, noise_sq / n, sigma)


def make_lower_bound_problem(n: int, D: float = 1.0, L: float = 1.0, rng: Optional[np.random.Generator] = None):
    """Signed linear loss over the standard basis of R^n.

    Example ``i`` is ``(e_i, y_i)`` with ``y_i`` uniform over {0, 1}; the loss
    is ``L <w, x>`` for label 0 and ``-L <w, x>`` for label 1. The data
    distribution is uniform over the ``n`` examples, so population and
    empirical risk coincide and the minimizer over the ball is
    ``(D/2) s / sqrt(n)`` with ``s_i = +1`` for label 1 and ``-1`` for label 0.

    The basis vector ``e_i`` is passed around as the integer ``i``; the loss
    and gradient expand it.

    Returns:
      ``(problem, (idx, y))`` with ``idx = arange(n)``.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = rng.integers(0, 2, size=n)
    signs = 2.0 * labels - 1.0  # label 1 -> +1

    def sign(y):
        return L if int(y) == 0 else -L

    def loss(w, x, y):
        return sign(y) * float(w[int(x)])

    def grad(w, x, y):
        g = np.zeros(n)
        g[int(x)] = sign(y)
        return g

    def sample(gen, m):
        idx = gen.integers(0, n, size=m)
        return idx, labels[idx]

    def population_risk(w):
        return float(-L * np.dot(signs, w) / n)

    problem = ScoProblem(
        dim=n, diameter=D, lipschitz=L, num_classes=2, loss=loss, grad=grad,
        sample=sample, population_risk=population_risk,
        optimal_risk=-D * L / (2.0 * math.sqrt(n)), name="lower-bound",
    )
    return problem, (np.arange(n), labels)


def lower_bound_minimizer(problem: ScoProblem, labels) -> np.ndarray:
    signs = 2.0 * np.asarray(labels, dtype=float) - 1.0
    return problem.radius * signs / math.sqrt(signs.size)


def simplex_means(K: int, d: int, separation: float) -> np.ndarray:
    """``K`` points in R^d with every pairwise distance equal to ``separation``."""
    if K < 2 or d < 1:
        raise ParameterError("need K >= 2 and d >= 1")
    if d < K - 1:
        raise ParameterError(f"equidistant means for K={K} need d >= {K - 1}, got d={d}")
    centered = np.eye(K) - 1.0 / K
    # Orthonormal coordinates of the (K-1)-dim centered simplex.
    u, s, _ = np.linalg.svd(centered)
    coords = centered @ u[:, : K - 1]
    means = np.zeros((K, d))
    means[:, : K - 1] = coords * (separation / math.sqrt(2.0))
    return means


def make_blob_problem(n: int, K: int, d: int, separation: float, rng: np.random.Generator):
    """Unit-covariance Gaussian clusters with equidistant means.

    Labels cycle through ``0..K-1`` before shuffling, so ``n = K`` yields one
    example per class.

    Returns:
      ``(X, y, means)``.
    """
    means = simplex_means(K, d, separation)
    y = np.arange(n) % K
    y = y[rng.permutation(n)]
    X = means[y] + rng.normal(size=(n, d))
    return X, y, means


def nearest_mean_accuracy(X, y, means) -> float:
    d2 = ((np.asarray(X)[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == np.asarray(y)))


def make_softmax_problem(K: int, d: int, D: float = 2.0, separation: float = 2.0,
                         rng: Optional[np.random.Generator] = None) -> ScoProblem:
    """Multinomial logistic loss of a linear model ``W`` (flattened ``K*d``).

    Features are blob samples rescaled to norm at most 1, so the loss is
    ``sqrt(2)``-Lipschitz in ``W``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if d >= K - 1:
        means = simplex_means(K, d, separation)
    else:
        means = rng.normal(size=(K, d)) * separation

    def features(gen, m):
        y = gen.integers(0, K, size=m)
        x = means[y] + gen.normal(size=(m, d))
        norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1.0)
        return x / norms, y

    def logits(w, x):
        return w.reshape(K, d) @ x

    def loss(w, x, y):
        z = logits(w, x)
        m = z.max()
        return float(m + np.log(np.exp(z - m).sum()) - z[int(y)])

    def grad(w, x, y):
        z = logits(w, x)
        p = np.exp(z - z.max())
        p /= p.sum()
        p[int(y)] -= 1.0
        return np.outer(p, x).ravel()

    return ScoProblem(
        dim=K * d, diameter=D, lipschitz=math.sqrt(2.0), num_classes=K,
        loss=loss, grad=grad, sample=features, name="softmax",
    )


def make_linear_problem(K: int, d: int, D: float = 2.0, rng: Optional[np.random.Generator] = None) -> ScoProblem:
    """Label-dependent linear loss ``<w, x> * c_y`` with ``|c_y| <= 1`` and ``||x|| <= 1``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    coef = rng.uniform(-1.0, 1.0, size=K)

    def features(gen, m):
        x = gen.normal(size=(m, d))
        x /= np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1.0)
        return x, gen.integers(0, K, size=m)

    def loss(w, x, y):
        return float(coef[int(y)] * np.dot(w, x))

    def grad(w, x, y):
        return coef[int(y)] * np.asarray(x, dtype=float)

    return ScoProblem(
        dim=d, diameter=D, lipschitz=1.0, num_classes=K, loss=loss, grad=grad,
        sample=features, name="linear",
    )


def reference_risk(problem: ScoProblem, X, y, iters: int = 500) -> float:
    """Empirical risk of projected full-batch gradient descent on ``(X, y)``.

    Stands in for the optimal population risk when no closed form exists.
    """
    w = np.zeros(problem.dim)
    risks = []
    for t in range(1, iters + 1):
        g = np.mean([problem.grad(w, x, yy) for x, yy in zip(X, y)], axis=0)
        w = problem.project(w - problem.diameter / (problem.lipschitz * math.sqrt(t)) * g)
        risks.append(empirical_risk(problem, w, X, y))
    return min(risks)


def empirical_risk(problem: ScoProblem, w, X, y) -> float:
    return float(np.mean([problem.loss(w, x, yy) for x, yy in zip(X, y)]))


def excess_risk(problem: ScoProblem, w, holdout=None, reference: Optional[float] = None) -> float:
    """Excess population risk of ``w``.

    Uses the closed form when the problem has one; otherwise the risk on the
    ``holdout`` sample ``(X, y)`` minus ``reference`` (see ``reference_risk``).
    """
    if problem.population_risk is not None and problem.optimal_risk is not None:
        return problem.population_risk(w) - problem.optimal_risk
    if holdout is None or reference is None:
        raise ParameterError(f"problem {problem.name!r} needs a holdout sample and reference risk")
    return empirical_risk(problem, w, *holdout) - reference
