"""Emitted tokens of step-by-step vs latent decoding across chain lengths."""

import argparse
from pathlib import Path

from latent_refine import bench
from latent_refine.tasks import gen_dag_reach, gen_mod_chain


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="results")
    p.add_argument("--k", type=int, default=10, help="tokens per reasoning step")
    args = p.parse_args()
    out = Path(args.out)
    for n in range(2, 11):
        rep = bench.run_token_report(gen_mod_chain(200, chain_len=n, seed=n), tokens_per_step=args.k)
        r = rep.rows[0]
        print(f"mod_chain len {n:2d}: cot {r.mean_cot:5.1f}  latent {r.mean_latent:.0f}  reduction {r.reduction_pct:.2f}%")
        rep.to_csv(out / f"tokens_mod_chain_len{n}.csv")
    rep = bench.run_token_report(gen_dag_reach(200, seed=0), tokens_per_step=args.k)
    r = rep.rows[0]
    print(f"dag_reach depth 3: cot {r.mean_cot:5.1f}  latent {r.mean_latent:.0f}  reduction {r.reduction_pct:.2f}%")
    rep.to_csv(out / "tokens_dag_reach.csv")


if __name__ == "__main__":
    main()
