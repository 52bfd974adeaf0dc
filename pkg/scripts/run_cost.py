"""Refinement at inference only, in continued training only, or both."""

import argparse
from pathlib import Path

from latent_refine import bench
from latent_refine.tasks import gen_dag_reach


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extra-epochs", type=int, default=5)
    args = p.parse_args()
    cfg = bench.CostConfig(extra_epochs=args.extra_epochs, seed=args.seed)
    data = gen_dag_reach(cfg.arm.n_train + cfg.arm.n_test, seed=args.seed)
    rep = bench.run_cost_arms(data[:cfg.arm.n_train], data[cfg.arm.n_train:], cfg)
    for r in rep.rows:
        print(f"{r.arm:<20} acc {r.accuracy:6.2f}%  {r.wall_time_s:8.3f}s  "
              f"{r.peak_memory_mb:8.2f} MB  checkpoints {r.checkpoints_written}")
    print(f"wrote {rep.to_csv(Path(args.out) / 'cost.csv')}")


if __name__ == "__main__":
    main()
