"""Heap-merge heuristic versus exhaustive search on random fitted models.

Reports, per (n, k), how often the heuristic spread is within a factor of
the exact-k optimum, and the same for the exact minimizer of the largest
cluster score (what the heuristic greedily targets).

    python3 scripts/partition_study.py --models 20
"""
import argparse
from collections import defaultdict

import numpy as np

from koopdec.checks import random_fitted_model
from koopdec.gramians import KappaEvaluator, compute_gramians
from koopdec.partition import multiway_partition, objective_spread, restricted_growth_strings, rgs_to_blocks


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--models", type=int, default=20)
    ap.add_argument("--factor", type=float, default=2.0)
    args = ap.parse_args()
    stats = defaultdict(lambda: [0, 0, 0])
    for n in range(6, 10):
        for seed in range(args.models):
            model = random_fitted_model(n, 1000 * n + seed)
            g = compute_gramians(model)
            ev = KappaEvaluator(model, g)
            for k in (2, 3):
                best_spread, minmax = np.inf, (np.inf, np.inf)
                for rgs in restricted_growth_strings(n, k):
                    blocks = rgs_to_blocks(rgs)
                    if len(blocks) != k:
                        continue
                    vals = [ev.kappa(b) for b in blocks]
                    s = objective_spread(vals)
                    best_spread = min(best_spread, s)
                    minmax = min(minmax, (max(vals), s))
                h = multiway_partition(model, g, k, evaluator=ev)
                row = stats[(n, k)]
                row[0] += 1
                row[1] += h.objective_spread <= args.factor * best_spread
                row[2] += minmax[1] <= args.factor * best_spread
    print(f"{'n':>3} {'k':>3} {'heuristic ok':>13} {'min-max optimum ok':>19}")
    for (n, k), (tot, h, mm) in sorted(stats.items()):
        print(f"{n:3d} {k:3d} {h:7d}/{tot:<5d} {mm:12d}/{tot:<5d}")
    tot = sum(r[0] for r in stats.values())
    print(f"overall: heuristic {sum(r[1] for r in stats.values())}/{tot}, "
          f"min-max optimum {sum(r[2] for r in stats.values())}/{tot}")


if __name__ == "__main__":
    main()
