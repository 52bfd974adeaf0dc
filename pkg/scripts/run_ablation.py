"""Four-mode ablation on the noisy-oracle arm and the trained-MLP arm."""

import argparse
import logging
from pathlib import Path

from latent_refine import bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="results")
    p.add_argument("--mlp-seeds", type=int, nargs="+", default=[10, 11, 12, 13, 14])
    p.add_argument("--skip-mlp", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)

    arm = bench.build_oracle_arm()
    print(f"oracle arm: noise {arm.noise:.4f}, mode=none {arm.baseline_accuracy:.2f}%")
    rep = bench.run_ablation(arm.testset, arm.model, arm.pair, arm.config.refinement, seeds=(0,))
    print(rep.format())
    rep.to_csv(out / "ablation_oracle.csv")

    if not args.skip_mlp:
        rep = bench.run_mlp_ablation(args.mlp_seeds)
        print("trained MLP arm")
        print(rep.format())
        rep.to_csv(out / "ablation_mlp.csv")


if __name__ == "__main__":
    main()
