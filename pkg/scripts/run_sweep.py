"""(alpha, eta) sensitivity grid of mode=both on the oracle arm, 3 rounds per query."""

import argparse
from pathlib import Path

import numpy as np

from latent_refine import bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="results")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    arm = bench.build_oracle_arm()
    alphas = bench.default_alpha_grid()
    etas = bench.default_eta_grid(arm.model.dim)
    grid = bench.run_sweep(arm.testset, arm.model, arm.pair, alphas, etas, rounds_R=3, seed=args.seed)
    path = grid.to_csv(Path(args.out) / "sweep_oracle.csv")
    with np.printoptions(precision=1, suppress=True):
        print("rows alpha", alphas)
        print("cols eta", [round(e, 4) for e in etas])
        print(grid.accuracy)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
