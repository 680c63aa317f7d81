"""Verification suites run by ``labelrand verify``.

Each suite returns a list of ``Check`` results; a suite passes when every
check does.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from labelrand import mechanisms, optimality, priors, sco
from labelrand.errors import ParameterError

DEFAULT_EPS_GRID = (0.1, 0.5, 1.0, 2.0, 4.0)
DLAPLACE_SCALES = (0.0125, 0.025, 0.5, 1.0)
DLAPLACE_TV_LIMIT = 0.005
UNBIASED_ATOL = 1e-10


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"[{status}] {self.name}" + (f": {self.detail}" if self.detail else "")


def _dirichlet(rng, K):
    return rng.dirichlet(np.ones(K))


def dp_suite(mechanism="classic", eps=1.0, claim_eps=None, classes=4, trials=100, k=None, seed=0):
    """Checks the exact DP ratio of a mechanism at a claimed budget."""
    claim = eps if claim_eps is None else claim_eps
    rng = np.random.default_rng(seed)
    if mechanism == "classic":
        tables = [mechanisms.classic_table(classes, eps)]
    elif mechanism in ("top-k", "with-prior"):
        if mechanism == "top-k" and k is None:
            raise ParameterError("top-k verification needs --k")
        tables = [
            mechanisms.mechanism_pmf(mechanism, eps, prior=_dirichlet(rng, classes), k=k)
            for _ in range(trials)
        ]
    else:
        raise ParameterError(f"unknown mechanism {mechanism!r}")
    worst = max(optimality.worst_ratio(t) for t in tables)
    ok = all(optimality.verify_dp(t, claim)[0] for t in tables)
    return [
        Check(
            f"dp {mechanism} K={classes} eps={eps:g} claim={claim:g}",
            ok,
            f"worst_ratio={worst:.12g} bound=e^{claim:g}={math.exp(claim):.12g} tables={len(tables)}",
        )
    ]


def optimality_suite(classes=6, trials=1000, eps_grid=DEFAULT_EPS_GRID, seed=0):
    """RRWithPrior against the exhaustive subset oracle on random priors."""
    rng = np.random.default_rng(seed)
    checks = []
    for eps in eps_grid:
        failures = 0
        for _ in range(trials):
            if not optimality.verify_rrp_optimal(_dirichlet(rng, classes), eps):
                failures += 1
        checks.append(
            Check(f"optimality K={classes} eps={eps:g}", failures == 0, f"{trials - failures}/{trials} priors optimal")
        )
    return checks


def expected_debiased_gradient(problem, w, x, y, support, eps):
    """Exact expectation of the debiased gradient over RR on ``support``."""
    support = [int(s) for s in support]
    keep = mechanisms.keep_probability(eps, len(support))
    flip = mechanisms.flip_probability(eps, len(support))
    total = np.zeros(problem.dim)
    for s in support:
        weight = keep if s == y else flip
        total += weight * sco.debiased_gradient(w, x, s, support, eps, problem)
    return total


def expected_debiased_loss(loss, t, x, y, support, eps):
    support = [int(s) for s in support]
    keep = mechanisms.keep_probability(eps, len(support))
    flip = mechanisms.flip_probability(eps, len(support))
    return sum(
        (keep if s == y else flip) * sco.debiased_loss(loss, t, x, s, support, eps) for s in support
    )


def random_instance(rng):
    """A random small problem, point, example and support for unbiasedness checks."""
    K = int(rng.integers(2, 7))
    kind = "softmax" if rng.random() < 0.5 else "linear"
    if kind == "softmax":
        d = int(rng.integers(1, 3))
        while K * d > 5 and K > 2:
            K -= 1
        problem = sco.make_softmax_problem(K, d, rng=rng)
    else:
        d = int(rng.integers(1, 6))
        problem = sco.make_linear_problem(K, d, rng=rng)
    X, Y = problem.sample(rng, 1)
    w = problem.project(rng.normal(size=problem.dim))
    k = int(rng.integers(1, K + 1))
    y = int(Y[0])
    support = sorted(int(s) for s in rng.choice(K, size=k, replace=False))
    if y not in support:
        support[int(rng.integers(k))] = y
        support.sort()
    eps = float(rng.choice(DEFAULT_EPS_GRID))
    return problem, w, X[0], y, support, eps


def unbiased_suite(trials=500, seed=0):
    rng = np.random.default_rng(seed)
    worst_g = worst_l = 0.0
    for _ in range(trials):
        problem, w, x, y, support, eps = random_instance(rng)
        truth = problem.grad(w, x, y)
        got = expected_debiased_gradient(problem, w, x, y, support, eps)
        worst_g = max(worst_g, float(np.max(np.abs(got - truth))))
        got_l = expected_debiased_loss(problem.loss, w, x, y, support, eps)
        worst_l = max(worst_l, abs(got_l - problem.loss(w, x, y)))
    return [
        Check("unbiased gradient", worst_g <= UNBIASED_ATOL, f"max abs error {worst_g:.3e} over {trials} instances"),
        Check("unbiased loss", worst_l <= UNBIASED_ATOL, f"max abs error {worst_l:.3e} over {trials} instances"),
    ]


def dlaplace_tv(a, draws, rng) -> float:
    """Total variation between ``draws`` samples and the exact pmf."""
    z = priors.discrete_laplace(a, rng, size=draws)
    lo, hi = int(z.min()), int(z.max())
    counts = np.bincount(z - lo, minlength=hi - lo + 1) / draws
    support = np.arange(lo, hi + 1)
    pmf = priors.discrete_laplace_pmf(support, a)
    outside = max(0.0, 1.0 - pmf.sum())
    return 0.5 * (float(np.abs(counts - pmf).sum()) + outside)


def histogram_dp_worst_log_ratio(eps_p, K=3, n=5, radius=4) -> float:
    """Largest log density ratio of the noisy histogram over all neighbor pairs.

    Enumerates every label vector of ``n`` examples over ``K`` classes, every
    single-label change, and every noisy output within ``radius`` of both
    true histograms.
    """
    worst = -math.inf
    hists = {}
    for labels in itertools.product(range(K), repeat=n):
        hists[labels] = np.bincount(labels, minlength=K)
    seen = set()
    for labels, h in hists.items():
        for i in range(n):
            for alt in range(K):
                if alt == labels[i]:
                    continue
                other = labels[:i] + (alt,) + labels[i + 1 :]
                key = (tuple(h), tuple(hists[other]))
                if key in seen:
                    continue
                seen.add(key)
                h2 = hists[other]
                lo = np.minimum(h, h2) - radius
                hi = np.maximum(h, h2) + radius
                grids = np.meshgrid(*[np.arange(l, u + 1) for l, u in zip(lo, hi)], indexing="ij")
                outs = np.stack([g.ravel() for g in grids], axis=1)
                a = eps_p / 2.0
                lp1 = priors.discrete_laplace_logpmf(outs - h, a).sum(axis=1)
                lp2 = priors.discrete_laplace_logpmf(outs - h2, a).sum(axis=1)
                worst = max(worst, float(np.max(lp1 - lp2)))
    return worst


def dlaplace_suite(scales=DLAPLACE_SCALES, draws=1_000_000, seed=0, eps_p=1.0):
    rng = np.random.default_rng(seed)
    checks = []
    for a in scales:
        tv = dlaplace_tv(a, draws, rng)
        checks.append(Check(f"dlaplace a={a:g}", tv < DLAPLACE_TV_LIMIT, f"TV={tv:.5f} limit={DLAPLACE_TV_LIMIT}"))
    worst = histogram_dp_worst_log_ratio(eps_p)
    checks.append(
        Check(
            f"histogram dp eps_p={eps_p:g}",
            worst <= eps_p * (1 + 1e-9),
            f"worst log ratio {worst:.12g}",
        )
    )
    return checks


SUITES = {
    "dp": dp_suite,
    "optimality": optimality_suite,
    "unbiased": unbiased_suite,
    "dlaplace": dlaplace_suite,
}
