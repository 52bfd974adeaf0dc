"""Export instances whose answer flips from wrong to gold under refinement."""

import argparse
from pathlib import Path

from latent_refine import bench
from latent_refine.engine import export_traces, find_flip_cases


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="results")
    p.add_argument("--limit", type=int, default=5)
    args = p.parse_args()
    arm = bench.build_oracle_arm()
    records = find_flip_cases(arm.testset, arm.model, arm.pair, arm.config.refinement, limit=args.limit)
    for r in records:
        print(f"{r.instance_id}: gold {r.gold}, before {r.before.predicted} "
              f"({r.before.as_dict()[r.gold]:.3f} on gold), after {r.after.predicted} "
              f"({r.after.as_dict()[r.gold]:.3f} on gold)")
    Path(args.out).mkdir(parents=True, exist_ok=True)
    print(f"wrote {export_traces(records, Path(args.out) / 'traces.json')}")


if __name__ == "__main__":
    main()
