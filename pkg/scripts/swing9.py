"""Swing network pipeline: simulate, deep fit, Gramians, 3-way partition of
the nine non-reference generators, with the exhaustive oracle for comparison.

    python3 scripts/swing9.py --out runs/swing9
"""
import argparse
import json

from koopdec.cli import PipelineConfig, run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/swing9")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--lam", type=float, default=1.0)
    args = ap.parse_args()
    cfg = PipelineConfig.load("swing9")
    cfg.seed, cfg.partition.k, cfg.kappa.lam = args.seed, args.k, args.lam
    cfg.partition.oracle = True
    res = run_pipeline(cfg, out=args.out, verbose=True)
    print(json.dumps(res.metrics, indent=1))
    for stage, sec in res.timings.items():
        print(f"{stage:>10s} {sec:7.2f} s")


if __name__ == "__main__":
    main()
