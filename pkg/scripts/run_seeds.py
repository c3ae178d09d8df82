"""Train and evaluate the full pipeline for several seeds at the acceptance profile.

    python scripts/run_seeds.py --seeds 0 1 2 --out results/seeds

Writes per-seed checkpoints, result.json, report.csv and curves.csv, plus a
summary table and the trend verdicts.
"""
import argparse
import json
from pathlib import Path

from dualplan.config import load_config
from dualplan.experiment import Verdicts, acceptance_config, run_seed, summary_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--config", default=None, help="config JSON (default: acceptance profile)")
    ap.add_argument("--out", default="results/seeds")
    ap.add_argument("--no-baselines", action="store_true")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else acceptance_config()
    out = Path(args.out)
    results = []
    for seed in args.seeds:
        print(f"seed {seed}")
        results.append(run_seed(cfg, seed, out_dir=out, baselines=not args.no_baselines))
    table = summary_table(results)
    v = Verdicts.of(results)
    print(table)
    print(json.dumps(v.__dict__))
    (out / "summary.txt").write_text(table + "\n" + json.dumps(v.__dict__) + "\n")


if __name__ == "__main__":
    main()
