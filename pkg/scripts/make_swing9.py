"""Generate the shipped 10-machine (9 + reference) swing parameter file.

Values are illustrative: a meshed ring with a few chords, mostly inductive
lines with small losses, a uniform damping-to-inertia ratio (so the
dynamics relative to the reference machine are self-contained) and
mechanical powers chosen so that ``delta_eq`` is an exact equilibrium.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from koopdec.systems import SwingNetworkParams


def build(seed=7, n_gen=10, damping_ratio=0.15):
    rng = np.random.default_rng(seed)
    M = np.round(rng.uniform(3.0, 8.0, n_gen), 3)
    D = np.round(damping_ratio * M, 4)
    V = np.round(rng.uniform(0.98, 1.05, n_gen), 3)
    edges = [(i, (i + 1) % n_gen) for i in range(n_gen)] + [(0, 5), (2, 7), (3, 8), (1, 4)]
    B = np.zeros((n_gen, n_gen))
    G = np.zeros((n_gen, n_gen))
    for i, j in edges:
        b = round(float(rng.uniform(0.6, 1.6)), 3)
        B[i, j] = B[j, i] = b
        G[i, j] = G[j, i] = round(0.05 * b, 4)
    delta_eq = np.round(rng.uniform(-0.3, 0.3, n_gen), 3)
    delta_eq[-1] = 0.0
    p = SwingNetworkParams(M, D, np.zeros(n_gen), V, G, B, reference=n_gen - 1, delta_eq=delta_eq,
                           name="swing9-illustrative")
    p.Pm = p.electrical_power(delta_eq)
    return p


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/koopdec/data/swing9.json"))
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    p = build(args.seed)
    Path(args.out).write_text(json.dumps(p.to_dict(), indent=1) + "\n")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
