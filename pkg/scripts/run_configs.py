"""Run experiment plans and write raw rows plus a per-cell summary.

    python3 scripts/run_configs.py configs/histogram_clusters.toml --by K,eps --value mse
    ELDP_THREADS=4 python3 scripts/run_configs.py configs/*.toml

Without --by/--value the summary groups on the columns that differ between
variants and reports the experiment's main error column.
"""
import argparse
from pathlib import Path

from eldp import experiments as ex

MAIN_VALUE = {"heavy-hitters": "loss", "histogram": "mse", "sgd-sim": "error"}

p = argparse.ArgumentParser()
p.add_argument("plans", nargs="+")
p.add_argument("--out", default="results")
p.add_argument("--replicates", type=int)
p.add_argument("--by")
p.add_argument("--value")
args = p.parse_args()

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
for path in args.plans:
    plan = ex.load_plan(path, {"replicates": args.replicates})
    rows = ex.run_plan(plan)
    stem = Path(path).stem
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        ex.write_csv(rows, fh)
    varied = sorted({k for v in plan.variants for k in v})
    by = args.by.split(",") if args.by else varied + ["eps"]
    value = args.value or MAIN_VALUE[plan.experiment]
    summary = ex.summarize(rows, by, value)
    with open(out / f"{stem}_summary.csv", "w", newline="") as fh:
        ex.write_csv(summary, fh)
    print(f"{path}: {len(rows)} rows -> {out / stem}.csv")
    for row in summary:
        cell = " ".join(f"{k}={row[k]}" for k in by)
        print(f"  {cell}: {value} {row['mean']:.4g} +- {row['ci_halfwidth']:.2g}")
