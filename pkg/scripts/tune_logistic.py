"""Pick (q, alpha0, rho) per coverage and privacy mode on tuning seeds, then write a plan.

The tuned plan evaluates on seeds 0.. and tuning uses seeds from --tune-seed
on, so the two never overlap for the default settings.

    python3 scripts/tune_logistic.py -o configs/logistic_eps2.toml
"""
import argparse
import itertools
import time

import numpy as np

from eldp import experiments as ex

p = argparse.ArgumentParser()
p.add_argument("--eps", type=float, default=2.0)
p.add_argument("--coverage", type=int, nargs="+", default=[2, 5, 8])
p.add_argument("--privacy", nargs="+", default=["element", "user", "none"])
p.add_argument("--q", type=float, nargs="+", default=[0.05, 0.1, 0.2])
p.add_argument("--alpha0", type=float, nargs="+", default=[1, 3, 10, 30, 100])
p.add_argument("--rho", type=float, nargs="+", default=[0.1, 0.25, 0.5, 1.0])
p.add_argument("--tune-seed", type=int, default=1000)
p.add_argument("--tune-replicates", type=int, default=4)
p.add_argument("--replicates", type=int, default=20, help="replicates in the written plan")
p.add_argument("-o", "--output", required=True)
args = p.parse_args()

base = ex.LogisticSetup()
delta = ex.default_delta(base.n)
seeds = range(args.tune_seed, args.tune_seed + args.tune_replicates)
variants = []
start = time.time()
for k, mode in itertools.product(args.coverage, args.privacy):
    scores = {}
    for q, a0, rho in itertools.product(args.q, args.alpha0, args.rho):
        setup = ex.override_setup(base, dict(k_per_user=k, privacy=mode, q=q, alpha0=a0, rho=rho), "grid")
        try:
            scores[q, a0, rho] = np.mean([ex.logistic_trial(setup, args.eps, delta, s)["error"] for s in seeds])
        except ArithmeticError:
            scores[q, a0, rho] = np.inf
    q, a0, rho = min(scores, key=scores.get)
    print(f"k={k} {mode:7s} q={q} alpha0={a0} rho={rho} tuning error {scores[q, a0, rho]:.4f}"
          f"  [{time.time() - start:.0f}s]", flush=True)
    variants.append(dict(k_per_user=k, privacy=mode, q=q, alpha0=a0, rho=rho))

lines = [
    f"# tuned by scripts/tune_logistic.py on seeds {seeds.start}..{seeds.stop - 1}",
    'experiment = "sgd-sim"',
    f"eps = [{args.eps!r}]",
    f"replicates = {args.replicates}",
    "seed = 0",
    "",
    "[setup]",
    f"n = {base.n}",
    f"m = {base.m}",
    f"K = {base.K}",
    f"dim = {base.dim}",
    f"T = {base.T}",
    f"beta = {base.beta}",
    f"radius = {base.radius}",
]
for v in variants:
    lines += ["", "[[variants]]"] + [f"{key} = {val!r}" if not isinstance(val, str) else f'{key} = "{val}"'
                                     for key, val in v.items()]
with open(args.output, "w") as fh:
    fh.write("\n".join(lines) + "\n")
