"""Fast-planner L2 as a function of the slow planner's delay, from trained checkpoints.

    python scripts/latency_sweep.py --checkpoints results/seeds/seed0/checkpoints --config cfg.json

The checkpoints must have been trained with the same config (hash-checked).
Delays that are not multiples of the tick leave odd frames without a usable
plan, so the served fraction is reported alongside the error.
"""
import argparse

import numpy as np

from dualplan import scenario as sc
from dualplan.config import load_config
from dualplan.experiment import acceptance_config, gt_for, mean_l2
from dualplan.plot import rows_csv
from dualplan.training import Pipeline, prepare_split


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoints", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--delays", type=float, nargs="+", default=[0.0, 0.5, 1.0, 1.5, 2.0, float("inf")])
    ap.add_argument("--n-test", type=int, default=200)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else acceptance_config()
    pipe = Pipeline(cfg, args.seed)
    pipe.load(args.checkpoints)
    ds = sc.build_dataset(cfg.scenario, args.seed + 10_000, 0, 0, args.n_test)
    test = prepare_split(ds.subset("test"), cfg)
    sf = test.frames(long=False)
    gs = gt_for(test, sf, False)
    rows = {}
    for d in args.delays:
        syn = pipe.synergy_inputs(test, delay=d)
        rows[f"{d:g}"] = {"l2": mean_l2(pipe.e2e_predict(test, sf, syn), gs), "served": len(syn) / len(sf)}
        print(f"delay {d:>6g} s  L2 {rows[f'{d:g}']['l2']:.4f}  served {rows[f'{d:g}']['served']:.0%}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(rows_csv(rows, ("l2", "served")))
    print("plain", np.round(mean_l2(pipe.e2e_predict(test, sf), gs), 4))


if __name__ == "__main__":
    main()
