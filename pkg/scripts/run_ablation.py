"""B / D / D+R / DTR ablation on the shifted-Gaussians task.

    python scripts/run_ablation.py --seeds 0,1,2,3,4 --jobs 1
"""
import argparse
import json

from dtr.cli import DataFactory, build_datasets, sync_dims
from dtr.config import parse_config
from dtr.evaluation import fmt_pct, run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    cfg = parse_config(None, args.set)
    sync_dims(cfg, build_datasets(cfg)[0])
    seeds = [int(s) for s in args.seeds.split(",")]
    rows, summary = run_ablation(cfg.train, DataFactory(cfg), seeds, args.jobs)
    print(f"{'method':<6} {'median':>7} {'mean':>6} {'std':>5}")
    for row in rows:
        print(f"{row['method']:<6} {fmt_pct(row['median']):>7} {fmt_pct(row['mean']):>6} {fmt_pct(row['std']):>5}")
    print(json.dumps({k: v for k, v in summary.items() if k != "d_equals_d_r_per_seed"}))


if __name__ == "__main__":
    main()
