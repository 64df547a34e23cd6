"""Empirical covariance of sqrt(n)(theta_bar - theta*) for averaged private SGD on a 2-D quadratic.

Each replicate draws a fresh sample and runs one-user-per-step SGD for
gamma * n steps, then compares against ``predict_covariance``.

    python3 scripts/covariance_sim.py --gamma 2 --sigma 0.02 --replicates 400
"""
import argparse
import math

import numpy as np

from eldp.accountant import SubsampleSpec
from eldp.mechanisms import NoiseSpec
from eldp.optim import SgdConfig, predict_covariance, quadratic_loss, run_private_sgd
from eldp.simdata import gen_location

p = argparse.ArgumentParser()
p.add_argument("--n", type=int, default=2000)
p.add_argument("--gamma", type=int, default=2, help="steps per sample point")
p.add_argument("--sigma", type=float, default=0.02)
p.add_argument("--rho", type=float, default=50.0)
p.add_argument("--alpha0", type=float, default=1.0)
p.add_argument("--beta", type=float, default=0.6)
p.add_argument("--replicates", type=int, default=400)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

A = np.array([[2.0, 0.5], [0.5, 1.0]])
C = np.array([[1.0, 0.6], [0.6, 1.0]])
mean = np.array([1.0, -1.0])
draws = np.empty((args.replicates, 2))
for r in range(args.replicates):
    seed = args.seed + r
    sample = gen_location(args.n, mean, C, seed=[seed, 0])
    config = SgdConfig(args.alpha0, args.beta, args.gamma * args.n, SubsampleSpec.fixed(1, args.n),
                       NoiseSpec(args.sigma, args.rho), radius=100.0, seed=[seed, 1])
    draws[r] = math.sqrt(args.n) * (run_private_sgd(sample, config, quadratic_loss(A)).theta_bar - mean)

empirical = np.cov(draws.T)
predicted = predict_covariance(A, A @ C @ A, args.gamma, args.sigma, args.rho, 1)
np.set_printoptions(precision=4, suppress=True)
print("empirical\n", empirical)
print("predicted\n", predicted)
print("max entrywise relative error", float(np.max(np.abs(empirical / predicted - 1))))
