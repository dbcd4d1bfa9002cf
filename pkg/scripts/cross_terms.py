"""Cross-term ratio ||K_xw|| / (||K_x|| + ||K_u|| + ||K_xw||) for additive-input
maps versus the two-state example on identical initial conditions and inputs.

    python3 scripts/cross_terms.py
"""
import argparse
from functools import partial

import numpy as np

from koopdec.dictionary import MixedPolynomialDictionary, PolynomialDictionary
from koopdec.koopman import TrajectoryDataset, cross_term_ratio, fit_edmd
from koopdec.systems import (
    TwoStateParams,
    additive_two_state_map,
    invariant_additive_map,
    simulate_map,
    two_state_map,
)


def dataset(f, seed, n_traj=100, T=20, amp=0.2):
    rng = np.random.default_rng(seed)
    return TrajectoryDataset.concatenate(
        [simulate_map(f, rng.uniform(-0.5, 0.5, 2), rng.uniform(-amp, amp, (T, 1))) for _ in range(n_traj)])


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    p = TwoStateParams()
    invariant = (PolynomialDictionary(2, 2, exponents=[(2, 0)]), PolynomialDictionary(1, 3),
                 MixedPolynomialDictionary(2, 1, 3))
    generic = (PolynomialDictionary(2, 3), PolynomialDictionary(1, 3), MixedPolynomialDictionary(2, 1, 3))
    cases = [
        ("additive, invariant dictionary", invariant_additive_map, invariant),
        ("two-state example, same dictionary", partial(two_state_map, p), invariant),
        ("additive companion, cubic dictionary", partial(additive_two_state_map, p), generic),
        ("two-state example, cubic dictionary", partial(two_state_map, p), generic),
    ]
    for name, f, dicts in cases:
        r = [cross_term_ratio(fit_edmd(dataset(f, s), *dicts)) for s in range(args.seeds)]
        print(f"{name:40s} ratio {np.mean(r):.2e} (min {min(r):.2e}, max {max(r):.2e})")


if __name__ == "__main__":
    main()
