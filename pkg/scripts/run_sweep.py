"""Reconstruction-interval sensitivity sweep (target accuracy of C_di per r).

    python scripts/run_sweep.py --r-values 1,3,5,7,9 --seeds 0,1,2,3,4
"""
import argparse

from dtr.cli import DataFactory, build_datasets, sync_dims
from dtr.config import parse_config
from dtr.evaluation import fmt_pct, run_sensitivity_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--r-values", default="1,3,5,7,9")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    cfg = parse_config(None, args.set)
    sync_dims(cfg, build_datasets(cfg)[0])
    rows = run_sensitivity_sweep(cfg.train, DataFactory(cfg), [int(s) for s in args.seeds.split(",")],
                                 [int(r) for r in args.r_values.split(",")], args.jobs)
    for row in rows:
        print(f"r={row['r']}  median {fmt_pct(row['median'])}  mean {fmt_pct(row['mean'])} +- {fmt_pct(row['std'])}")
    medians = [row["median"] for row in rows]
    print(f"spread of medians: {max(medians) - min(medians):.4f}")


if __name__ == "__main__":
    main()
