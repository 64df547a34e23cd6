"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary repeats at the
end of the run. Thresholds, grids and replicate counts are fixed; nothing
here is tuned to make a check pass.
"""
import itertools
import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binom

from eldp import experiments as ex
from eldp.accountant import SubsampleSpec, moments_accountant_eps
from eldp.mechanisms import NoiseSpec, heavy_hitters, histogram_mechanism, indicator_moments
from eldp.optim import (
    LabeledUser,
    SgdConfig,
    element_update,
    logistic_loss,
    predict_covariance,
    quadratic_loss,
    run_private_sgd,
)
from eldp.simdata import gen_location

ROOT = Path(__file__).resolve().parents[1]
pytestmark = pytest.mark.acceptance


def test_01_gaussian_closed_form(record_criterion):
    start = time.perf_counter()
    worst = 0.0
    for sigma, alpha in itertools.product((1, 2, 4, 8), (2, 4, 8, 16)):
        exact = 2 * alpha / sigma**2
        worst = max(worst, abs(moments_accountant_eps(1.0, sigma, alpha) / exact - 1))
    record_criterion(1, "full-batch Renyi value vs Gaussian closed form", worst <= 1e-4,
                     f"max relative error {worst:.2e} over 16 points", time.perf_counter() - start, 5)


def test_02_small_rate_envelope(record_criterion):
    start = time.perf_counter()
    ratios = []
    for sigma, q in itertools.product((2, 4, 8), (0.01, 0.05, 0.1)):
        alpha_max = sigma**2 * math.log(1 / (q * sigma))
        for frac in (0.25, 0.5, 0.75, 1.0):
            alpha = 1 + (alpha_max - 1) * frac
            value = moments_accountant_eps(q, sigma, alpha)
            envelope = 1.5 * q * q * alpha / ((1 - q) * sigma**2)
            ratios.append(value / envelope if value > 0 else -1.0)
    ratios = np.array(ratios)
    inside = int(np.sum((ratios > 0) & (ratios <= 1)))
    record_criterion(2, "subsampled Renyi value inside 1.5 q^2 alpha/((1-q) sigma^2)", inside == len(ratios),
                     f"{inside}/{len(ratios)} points inside, value/envelope in "
                     f"[{ratios.min():.3f}, {ratios.max():.3f}]", time.perf_counter() - start, 30)


def test_03_binomial_tail_inequalities(record_criterion):
    start = time.perf_counter()
    violations, checked = [], 0
    for m, t in itertools.product((3, 10, 50, 200), (0, 1, 3, 8)):
        for p in (1 / m**2, 0.01, 0.1, 0.25):
            level = 3 * m * p + 3 * math.log(m) + t
            top = math.ceil(level)
            at_least = math.exp(binom.logsf(top - 1, m, p))
            exactly = math.exp(binom.logpmf(top, m, p)) if top <= m else 0.0
            tail_sum = float(np.exp(binom.logsf(np.arange(top, m + 1) - 1, m, p)).sum())
            slack = 1 + 1e-12
            ok = (tail_sum <= 2 * at_least * slack and 2 * at_least <= 4 * exactly * slack
                  and exactly <= p * 2.0**-t * slack)
            checked += 1
            if not ok:
                violations.append((m, p, t))
    record_criterion(3, "binomial tail inequalities by exact pmf", not violations,
                     f"{len(violations)} violations over {checked} (m, p, t) cells", time.perf_counter() - start, 10)


def _compositions(m, d):
    for cut in itertools.combinations(range(m + d - 1), d - 1):
        edges = (-1,) + cut + (m + d - 1,)
        yield np.array([edges[i + 1] - edges[i] - 1 for i in range(d)])


def test_04_indicator_moments(record_criterion):
    start = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(4)
    for m, d in itertools.product(range(1, 6), range(1, 5)):
        p = rng.dirichlet(np.ones(d))
        first, second = np.zeros(d), np.zeros((d, d))
        for x in _compositions(m, d):
            w = math.factorial(m) / math.prod(math.factorial(int(c)) for c in x) * float(np.prod(p**x))
            y = (x > 0).astype(float)
            first += w * y
            second += w * np.outer(y, y)
        q, S = indicator_moments(p, m)
        worst = max(worst, float(np.abs(q - first).max()), float(np.abs(S - second).max()))

    m, draws = 50, 1_000_000
    p = np.array([0.002, 0.005, 0.01, 0.02, 0.963])
    Y = (rng.multinomial(m, p, size=draws) > 0).astype(float)
    q, S = indicator_moments(p, m)
    emp = Y.T @ Y / draws
    se = np.sqrt(S * (1 - S) / draws)
    z = float(np.max(np.abs(emp - S) / np.where(se > 0, se, 1.0)))
    ok = worst <= 1e-12 and z <= 3
    record_criterion(4, "indicator moments by enumeration and Monte Carlo", ok,
                     f"enumeration max error {worst:.1e}, Monte Carlo max |z| {z:.2f}",
                     time.perf_counter() - start, 60)


def _heavy_hitters_arm(setup, replicates, delta):
    el, us = [], []
    for r in range(replicates):
        el.append(ex.heavy_hitters_trial(setup, 1.0, delta, r))
        us.append(ex.heavy_hitters_trial(replace(setup, level="user"), 1.0, delta, r))
    loss_el = np.array([row["loss"] for row in el], dtype=float)
    loss_us = np.array([row["loss"] for row in us], dtype=float)
    share = float(np.mean(loss_el <= loss_us))
    upper = loss_el.mean() + 1.645 * loss_el.std(ddof=1) / math.sqrt(replicates)
    return share, loss_el.mean(), loss_us.mean(), upper, el[0]["bound"]


def test_05_heavy_hitters_separation(record_criterion):
    start = time.perf_counter()
    delta = ex.default_delta(2000)
    details, ok = [], True
    # uniform probabilities leave no separated pairs; the linear profile at d=400 has many
    for label, setup in [("uniform d=200", ex.HeavyHittersSetup(n=2000, m=100, d=200, probs="uniform")),
                         ("linear d=400", ex.HeavyHittersSetup(n=2000, m=100, d=400, probs="linear"))]:
        share, mean_el, mean_us, upper, bound = _heavy_hitters_arm(setup, 100, delta)
        ok &= share >= 0.95 and upper <= bound
        details.append(f"{label}: element<=user in {share:.0%}, mean loss {mean_el:.1f} vs {mean_us:.1f}, "
                       f"upper 95% {upper:.1f} <= t^2={bound}")
    record_criterion(5, "heavy hitters ordering loss", ok, "; ".join(details), time.perf_counter() - start, 300)


def test_06_histogram_separation(record_criterion):
    start = time.perf_counter()
    delta = ex.default_delta(2000)
    Ks, epsilons = (1, 10, 100, 1000), (1.0, 2.0, 4.0)
    mse = {(K, e): np.mean([ex.histogram_trial(ex.HistogramSetup(K=K), e, delta, r)["mse"] for r in range(50)])
           for K in Ks for e in epsilons}
    inversions = {e: int(sum(mse[b, e] > mse[a, e] for a, b in zip(Ks, Ks[1:]))) for e in epsilons}
    ratio = mse[1000, 1.0] / mse[1, 1.0]
    ok = all(v <= 1 for v in inversions.values()) and ratio <= 0.25
    record_criterion(6, "histogram MSE falls with the number of clusters", ok,
                     f"inversions per eps {inversions}, K=1000/K=1 MSE at eps=1 {ratio:.3f}",
                     time.perf_counter() - start, 600)


def test_07_sensitivity_audits(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    pairs = 10_000
    worst_ind = worst_hist = worst_upd = 0.0
    for _ in range(pairs):
        # one item per element: a neighbor rewrites one count of one user
        S = rng.integers(0, 4, size=(3, 6))
        T = S.copy()
        T[rng.integers(3), rng.integers(6)] = rng.integers(0, 4)
        worst_ind = max(worst_ind, float(np.linalg.norm(heavy_hitters(S, 0.0) - heavy_hitters(T, 0.0))))

    d, K, n = 12, 4, 3
    for _ in range(pairs):
        labels = rng.integers(0, K, size=d)
        rho = float(rng.uniform(0.5, 10))
        S = rng.multinomial(30, np.ones(d) / d, size=n).astype(float)
        T = S.copy()
        block = labels == rng.integers(K)
        T[rng.integers(n), block] = rng.integers(0, 30, size=int(block.sum()))
        diff = n * (histogram_mechanism(S, rho, labels, 0.0) - histogram_mechanism(T, rho, labels, 0.0))
        worst_hist = max(worst_hist, float(np.linalg.norm(diff)) / rho)

    loss = logistic_loss()
    for _ in range(pairs):
        m = int(rng.integers(1, 12))
        X = rng.standard_normal((m, 3))
        X /= np.maximum(1.0, np.linalg.norm(X, axis=1, keepdims=True) / 2)
        user = LabeledUser(X, rng.choice([-1.0, 1.0], size=m), rng.integers(0, 3, size=m))
        k = int(rng.choice(user.clusters))
        keep = user.clusters != k
        extra = int(rng.integers(0, 6))
        Xe = rng.standard_normal((extra, 3))
        other = LabeledUser(np.concatenate([X[keep], Xe]),
                            np.concatenate([user.labels[keep], rng.choice([-1.0, 1.0], size=extra)]),
                            np.concatenate([user.clusters[keep], np.full(extra, k)]))
        theta = rng.standard_normal(3)
        alpha, rho = float(rng.uniform(0.01, 2)), float(rng.uniform(0.01, 2))
        diff = element_update(theta, user, alpha, rho, loss) - element_update(theta, other, alpha, rho, loss)
        worst_upd = max(worst_upd, float(np.linalg.norm(diff)) / rho)

    tol = 1e-12
    ok = worst_ind <= 1 + tol and worst_hist <= math.sqrt(2) + tol and worst_upd <= 2 + tol
    record_criterion(7, "element sensitivity audits", ok,
                     f"indicator sum {worst_ind:.4f} <= 1, histogram {worst_hist:.4f} rho <= 1.4142 rho, "
                     f"update {worst_upd:.4f} rho <= 2 rho over {pairs} pairs each",
                     time.perf_counter() - start, 120)


def _averaged_sgd_draws(gamma, sigma, replicates, A, C, mean, n):
    rho = 50.0
    out = np.empty((replicates, 2))
    for r in range(replicates):
        sample = gen_location(n, mean, C, seed=[r, 0])
        config = SgdConfig(1.0, 0.6, gamma * n, SubsampleSpec.fixed(1, n), NoiseSpec(sigma, rho),
                           radius=100.0, seed=[r, 1])
        out[r] = math.sqrt(n) * (run_private_sgd(sample, config, quadratic_loss(A)).theta_bar - mean)
    return out, rho


def test_08_asymptotic_covariance(record_criterion):
    start = time.perf_counter()
    n, A = 2000, np.array([[2.0, 0.5], [0.5, 1.0]])
    C, mean = np.array([[1.0, 0.6], [0.6, 1.0]]), np.array([1.0, -1.0])
    grad_cov = A @ C @ A
    draws, rho = _averaged_sgd_draws(2, 0.02, 400, A, C, mean, n)
    predicted = predict_covariance(A, grad_cov, 2, 0.02, rho, 1)
    rel = float(np.max(np.abs(np.cov(draws.T) / predicted - 1)))
    draws, _ = _averaged_sgd_draws(4, 0.0, 400, A, C, mean, n)
    Hinv = np.linalg.inv(A)
    target = (1 + 1 / 4) * np.trace(Hinv @ grad_cov @ Hinv)
    trace_rel = abs(np.trace(np.cov(draws.T)) / target - 1)
    record_criterion(8, "covariance of the averaged iterate", rel <= 0.25 and trace_rel <= 0.25,
                     f"max entrywise relative error {rel:.3f} (sigma=0.02, gamma=2); "
                     f"noiseless trace relative error {trace_rel:.3f} (gamma=4)",
                     time.perf_counter() - start, 600)


def test_09_logistic_coverage_trend(record_criterion):
    start = time.perf_counter()
    plan = ex.load_plan(ROOT / "configs" / "logistic_eps2.toml")
    setups = plan.setups()
    assert plan.eps == (2.0,) and plan.replicates == 20
    assert all((s.dim, s.K, s.n, s.m) == (10, 10, 1000, 50) for s in setups)
    rows = ex.run_plan(plan, workers=1)
    means = {(int(r["k_per_user"]), r["privacy"]): r["mean"]
             for r in ex.summarize(rows, ["k_per_user", "privacy"], "error")}
    el = [means[k, "element"] for k in (2, 5, 8)]
    us = [means[k, "user"] for k in (2, 5, 8)]
    ok = el[0] > el[1] > el[2] and all(e < u for e, u in zip(el, us))
    detail = ", ".join(f"k={k}: element {e:.4f} user {u:.4f}" for k, e, u in zip((2, 5, 8), el, us))
    record_criterion(9, "logistic error falls with coverage, element beats user", ok, detail,
                     time.perf_counter() - start, 900)


def _cli(tmp, *argv):
    out = subprocess.run([sys.executable, "-m", "eldp", *map(str, argv)], capture_output=True, cwd=tmp)
    assert out.returncode == 0, out.stderr.decode()
    return out.stdout


def test_10_cli_determinism(record_criterion, tmp_path):
    start = time.perf_counter()
    (tmp_path / "acct.toml").write_text(
        'delta = 1e-5\n[[events]]\nmechanism = "subsampled-gaussian"\nq = 0.01\nsigma = 1.1\nT = 1000\n')
    (tmp_path / "plan.toml").write_text(
        'experiment = "histogram"\neps = [1.0, 2.0]\nreplicates = 2\n[setup]\nn = 100\nm = 10\nd = 40\nK = 4\n')
    _cli(tmp_path, "gen", "counts", "--n", 50, "--d", 20, "--K", 4, "--seed", 3, "--partition", "p.tsv",
         "-o", "c.csv")
    _cli(tmp_path, "gen", "logistic", "--n", 30, "--K", 4, "--dim", 3, "--seed", 3, "-o", "x.csv",
         "--truth", "t.txt")
    _cli(tmp_path, "run-plan", "plan.toml", "-o", "r.csv")
    commands = [
        ["gen", "counts", "--n", 50, "--d", 20, "--K", 4, "--seed", 3],
        ["gen", "logistic", "--n", 30, "--K", 4, "--dim", 3, "--seed", 3],
        ["account", "acct.toml"],
        ["heavy-hitters", "c.csv", "--partition", "p.tsv", "--eps", 1, "--seed", 5],
        ["histogram", "c.csv", "--partition", "p.tsv", "--eps", 1, "--rho", 4, "--seed", 5],
        ["sgd-sim", "--n", 60, "--m", 10, "--K", 4, "--k-per-user", 2, "--dim", 3, "--T", 30, "--seed", 5,
         "--replicates", 2],
        ["sgd-sim", "--data", "x.csv", "--truth", "t.txt", "--K", 4, "--m", 20, "--T", 30, "--seed", 5],
        ["run-plan", "plan.toml"],
        ["summarize", "r.csv", "--by", "eps", "--value", "mse"],
    ]
    differing = [c[0] for c in commands if _cli(tmp_path, *c) != _cli(tmp_path, *c)]
    record_criterion(10, "seeded CLI runs are byte-identical", not differing,
                     f"{len(commands) - len(differing)}/{len(commands)} commands identical across two runs",
                     time.perf_counter() - start, 60)
