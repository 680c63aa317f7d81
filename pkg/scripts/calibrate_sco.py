"""Calibrates the excess-risk threshold used by the SGD acceptance check.

Simulates label-RR SGD on the signed-linear basis problem with its own
closed-form update (only one coordinate moves per step and the squared norm
is tracked incrementally), independent of ``labelrand.sco``. Prints the
median excess risk over many seed groups and a frozen threshold.

    python scripts/calibrate_sco.py --n 10000 --eps 1 --groups 50
"""

import argparse
import math
import random
import statistics


def simulate(n, eps, D, L, seed):
    gen = random.Random(seed)
    signs = [1.0 if gen.random() < 0.5 else -1.0 for _ in range(n)]
    w = [0.0] * n
    norm_sq = 0.0
    scale_factor = 1.0  # w_true = scale_factor * w, so projection is O(1)
    radius = D / 2.0
    K = 2
    keep = math.exp(eps) / (math.exp(eps) + K - 1)
    debias = (math.exp(eps) + K - 1) / (math.exp(eps) - 1)
    base = D / (6.0 * K * L / eps)
    for t in range(1, n + 1):
        i = gen.randrange(n)
        s = signs[i] if gen.random() < keep else -signs[i]
        # loss = -L * s * w_i, so the debiased gradient is -debias * L * s * e_i
        # (the per-label correction cancels for two opposite gradients).
        step = base / math.sqrt(t) * debias * L * s
        old = w[i] * scale_factor
        new = old + step
        norm_sq += new * new - old * old
        w[i] = new / scale_factor
        norm = math.sqrt(max(norm_sq, 0.0))
        if norm > radius:
            shrink = radius / norm
            scale_factor *= shrink
            norm_sq = radius * radius
    risk = -L * sum(si * wi for si, wi in zip(signs, w)) * scale_factor / n
    return risk + D * L / (2.0 * math.sqrt(n))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--n", type=int, default=10000)
    parser.add_argument("--eps", type=float, default=1.0)
    parser.add_argument("--groups", type=int, default=50)
    parser.add_argument("--seeds-per-group", type=int, default=20)
    args = parser.parse_args()
    medians = []
    for g in range(args.groups):
        risks = [
            simulate(args.n, args.eps, 1.0, 1.0, 10_000 + g * args.seeds_per_group + s)
            for s in range(args.seeds_per_group)
        ]
        medians.append(statistics.median(risks))
    medians.sort()
    print(f"n={args.n} eps={args.eps} groups={args.groups}")
    print(f"median of group medians: {statistics.median(medians):.6f}")
    print(f"min/max group median: {medians[0]:.6f} / {medians[-1]:.6f}")
    print(f"frozen threshold (max group median * 1.2): {medians[-1] * 1.2:.6f}")
    ceiling = 0.35 * 2 * math.log(args.n) / (args.eps * math.sqrt(args.n))
    print(f"formula ceiling 0.35*DLK*ln(n)/(eps*sqrt(n)): {ceiling:.6f}")


if __name__ == "__main__":
    main()
