"""Seeded experiment plans: TOML manifests, replicate fan-out, tidy CSV rows and summaries.

Seeding rule: replicate ``r`` of a plan with seed base ``s`` runs under seed
``s + r``. Its data come from ``SeedSequence([s + r, 0])`` and its mechanism
noise from ``SeedSequence([s + r, 1, bits(eps)])``, where ``bits`` is the
IEEE-754 bit pattern of the privacy level. A single CLI run with ``--seed s + r``
and the same ``eps`` therefore reproduces that row exactly, and every variant
of a plan (cluster count, privacy mode, ...) sees the same data and noise.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .accountant import SubsampleSpec, calibrate_sgd_sigma, compose_renyi, gaussian_curve, renyi_to_dp, \
    sgd_epsilon, subsampled_gaussian_curve
from .errors import ConfigError, DomainError
from .mechanisms import NoiseSpec, choose_rho, cluster_probs, heavy_hitters, heavy_hitters_sigma, \
    histogram_mechanism, histogram_sigma, order_threshold, ordering_loss
from .optim import SgdConfig, logistic_loss, run_private_sgd, user_level_sigma
from .simdata import LogisticWorld, MultinomialWorld, block_labels, gen_logistic, gen_multinomial, l2_error, \
    linear_probs, strided_labels, zipf_probs

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def default_delta(n: int) -> float:
    return float(n) ** -1.1


def _eps_bits(eps: float) -> int:
    return struct.unpack("<Q", struct.pack("<d", float(eps)))[0]


def data_seed(seed: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), 0])


def noise_seed(seed: int, eps: float) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), 1, _eps_bits(eps)])


# ---------------------------------------------------------------- world setups

@dataclass(frozen=True)
class HeavyHittersSetup:
    n: int = 2000
    m: int = 100
    d: int = 200
    probs: str = "uniform"
    zipf_s: float = 1.0
    t: float | None = None
    level: str = "element"

    def item_probs(self) -> np.ndarray:
        if self.probs == "uniform":
            return np.full(self.d, 1.0 / self.d)
        if self.probs == "linear":
            return linear_probs(self.d)
        if self.probs == "zipf":
            return zipf_probs(self.d, self.zipf_s)
        raise DomainError(f"unknown probability profile {self.probs!r}")


@dataclass(frozen=True)
class HistogramSetup:
    n: int = 2000
    m: int = 200
    d: int = 1000
    K: int = 1
    labels: str = "block"
    zipf_s: float = 1.0
    zipf_offset: float = 10.0
    rho: float | None = None
    t: float | None = None
    rho_grid: tuple[float, ...] = ()
    validation_fraction: float = 0.2

    def item_probs(self) -> np.ndarray:
        return zipf_probs(self.d, self.zipf_s, self.zipf_offset)

    def cluster_labels(self, K: int | None = None) -> np.ndarray:
        K = self.K if K is None else K
        if self.labels == "block":
            return block_labels(self.d, K)
        if self.labels == "strided":
            return strided_labels(self.d, K)
        raise DomainError(f"unknown label layout {self.labels!r}")


@dataclass(frozen=True)
class LogisticSetup:
    n: int = 1000
    m: int = 50
    K: int = 10
    k_per_user: int = 5
    dim: int = 10
    radius_scale: float = 1.0
    q: float = 0.1
    alpha0: float = 1.0
    beta: float = 0.51
    T: int = 200
    rho: float = 1.0
    radius: float = 5.0
    sigma: float | None = None
    privacy: str = "element"

    def world(self) -> LogisticWorld:
        return LogisticWorld(self.dim, self.K, self.n, self.m, self.k_per_user, self.radius_scale)


SETUPS = {"heavy-hitters": HeavyHittersSetup, "histogram": HistogramSetup, "sgd-sim": LogisticSetup}


# ---------------------------------------------------------------- trials

def heavy_hitters_trial(setup: HeavyHittersSetup, eps: float, delta: float, seed: int) -> dict:
    """Ordering loss of the noisy indicator sum at the level's noise scale.

    The separation threshold always uses the element-level noise scale so that
    both levels are scored on the same pairs, and both levels share one noise
    draw.
    """
    p = setup.item_probs()
    if p.max() > 1.0 / (2 * setup.m) + 1e-15:
        raise DomainError(f"largest item probability {p.max():.4g} exceeds 1/(2m)")
    t = math.ceil(setup.d / 10) if setup.t is None else setup.t
    counts = gen_multinomial(MultinomialWorld(setup.n, setup.m, p), data_seed(seed))
    sigma_el = heavy_hitters_sigma(eps, delta, "element")
    sigma = heavy_hitters_sigma(eps, delta, setup.level, setup.m)
    gamma = order_threshold(setup.n, setup.m, setup.d, t, sigma_el, float(p.max()))
    H = heavy_hitters(counts, sigma, noise_seed(seed, eps))
    return {"seed": seed, "eps": eps, "delta": delta, "level": setup.level, "sigma": sigma,
            "gamma_sep": gamma, "loss": ordering_loss(H, p, gamma), "bound": t * t}


def _select_rho(setup: HistogramSetup, counts, labels, sigma, rng_seed) -> float:
    n_val = int(round(setup.validation_fraction * len(counts)))
    if not 0 < n_val < len(counts):
        raise DomainError("validation fraction leaves an empty split")
    perm = np.random.default_rng(rng_seed).permutation(len(counts))
    train, val = counts[perm[n_val:]], counts[perm[:n_val]]
    target = val.mean(axis=0) / setup.m
    scores = [np.sum((histogram_mechanism(train, r, labels, sigma, seed=rng_seed) / setup.m - target) ** 2)
              for r in setup.rho_grid]
    return float(setup.rho_grid[int(np.argmin(scores))])


def histogram_trial(setup: HistogramSetup, eps: float, delta: float, seed: int) -> dict:
    """Squared error of the normalized cluster-projected histogram, with the K=1 baseline on the same noise."""
    p = setup.item_probs()
    counts = gen_multinomial(MultinomialWorld(setup.n, setup.m, p), data_seed(seed))
    sigma = histogram_sigma(eps, delta)
    t = math.log(setup.n) if setup.t is None else setup.t

    def release(labels):
        if setup.rho is not None:
            rho = setup.rho
        elif setup.rho_grid:
            rho = _select_rho(setup, counts, labels, sigma, np.random.SeedSequence([seed, 2, _eps_bits(eps)]))
        else:
            rho = choose_rho(setup.m, cluster_probs(p, labels), t)
        est = histogram_mechanism(counts, rho, labels, sigma, seed=noise_seed(seed, eps)) / setup.m
        return rho, float(np.sum((est - p) ** 2))

    rho, mse = release(setup.cluster_labels())
    _, mse_user = release(setup.cluster_labels(1))
    return {"seed": seed, "eps": eps, "delta": delta, "K": setup.K, "rho": rho, "sigma": sigma,
            "mse": mse, "mse_user": mse_user}


@lru_cache(maxsize=64)
def _calibrated_sigma(eps: float, T: int, q: float, delta: float) -> float:
    return calibrate_sgd_sigma(eps, T, q, delta)


@lru_cache(maxsize=32)
def _logistic_data(world: LogisticWorld, seed: int):
    return gen_logistic(world, data_seed(seed))


def logistic_noise(setup: LogisticSetup, eps: float, delta: float) -> tuple[float, float]:
    """(element multiplier, multiplier actually injected) for the setup's privacy mode."""
    if setup.privacy == "none":
        return 0.0, 0.0
    sigma = setup.sigma if setup.sigma is not None else _calibrated_sigma(eps, setup.T, setup.q, delta)
    if setup.privacy == "element":
        return sigma, sigma
    if setup.privacy == "user":
        return sigma, user_level_sigma(sigma, setup.K, setup.m)
    raise DomainError(f"unknown privacy mode {setup.privacy!r}")


def logistic_run(sample, theta_star, setup: LogisticSetup, eps: float, delta: float, seed: int) -> dict:
    """Private SGD on a given sample; reports the distance of the averaged iterate to ``theta_star``."""
    sigma, injected = logistic_noise(setup, eps, delta)
    spent = sgd_epsilon(setup.T, setup.q, sigma, delta) if sigma else math.inf
    config = SgdConfig(setup.alpha0, setup.beta, setup.T, SubsampleSpec.poisson(setup.q),
                       NoiseSpec(injected, setup.rho), setup.radius,
                       seed=(int(seed), 1, _eps_bits(eps)))
    bound = float(np.linalg.norm(sample.features, axis=1).max()) if len(sample.labels) else 1.0
    result = run_private_sgd(sample, config, logistic_loss(bound))
    error = l2_error(result.theta_bar, theta_star) if theta_star is not None else math.nan
    return {"seed": seed, "eps": spent, "delta": delta, "privacy": setup.privacy,
            "error": error, "iterations": result.iterations,
            "k_per_user": setup.k_per_user, "q": setup.q, "alpha0": setup.alpha0, "rho": setup.rho,
            "sigma": sigma, "noise_multiplier": injected}


def logistic_trial(setup: LogisticSetup, eps: float, delta: float, seed: int) -> dict:
    data = _logistic_data(setup.world(), seed)
    return logistic_run(data.sample, data.theta_star, setup, eps, delta, seed)


TRIALS: dict[str, Callable[[Any, float, float, int], dict]] = {
    "heavy-hitters": heavy_hitters_trial,
    "histogram": histogram_trial,
    "sgd-sim": logistic_trial,
}


# ---------------------------------------------------------------- privacy ledgers for `account`

def account_events(events, delta: float) -> dict:
    """Compose a list of mechanism events under Renyi DP and convert to (eps, delta)."""
    curves = []
    for i, ev in enumerate(events):
        ev = dict(ev)
        kind = ev.pop("mechanism", None)
        try:
            sigma = float(ev.pop("sigma"))
            T = int(ev.pop("T", 1))
            if kind == "subsampled-gaussian":
                curves.append(subsampled_gaussian_curve(float(ev.pop("q")), sigma, T))
            elif kind == "gaussian":
                curves.append(gaussian_curve(sigma, float(ev.pop("sensitivity", 1.0))).scaled(T))
            else:
                raise ConfigError(f"events[{i}]: unknown mechanism {kind!r}")
        except KeyError as e:
            raise ConfigError(f"events[{i}]: missing field {e.args[0]!r}") from None
        if ev:
            raise ConfigError(f"events[{i}]: unknown field(s) {sorted(ev)}")
    if not curves:
        raise ConfigError("no events to account")
    out = renyi_to_dp(compose_renyi(curves), delta)
    return {"epsilon": out.epsilon, "delta": out.delta, "alpha": out.alpha}


# ---------------------------------------------------------------- plans

@dataclass(frozen=True)
class ExperimentPlan:
    """One experiment kind swept over ``eps`` x ``variants`` x replicates.

    ``variants`` are partial overrides of ``setup``; an empty tuple means the
    setup alone. ``delta=None`` means ``n ** -1.1`` for the setup's ``n``.
    """

    experiment: str
    eps: tuple[float, ...]
    setup: Any
    variants: tuple[dict, ...] = ()
    replicates: int = 1
    seed: int = 0
    delta: float | None = None
    output: str | None = None

    def __post_init__(self):
        if self.experiment not in TRIALS:
            raise ConfigError(f"experiment must be one of {sorted(TRIALS)}, got {self.experiment!r}")
        if self.replicates < 1:
            raise ConfigError(f"replicates must be >= 1, got {self.replicates}")
        if not self.eps or any(not e > 0 for e in self.eps):
            raise ConfigError("eps grid must be a non-empty list of positive numbers")
        if self.delta is not None and not 0 < self.delta < 1:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")

    def setups(self) -> list:
        if not self.variants:
            return [self.setup]
        return [override_setup(self.setup, v, f"variants[{i}]") for i, v in enumerate(self.variants)]

    def delta_for(self, setup) -> float:
        return default_delta(setup.n) if self.delta is None else self.delta


def override_setup(setup, values: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(setup)}
    clean = {}
    for key, value in values.items():
        key = key.replace("-", "_")
        if key not in names:
            raise ConfigError(f"{where}: unknown field {key!r} for {type(setup).__name__}")
        if isinstance(value, list):
            value = tuple(value)
        clean[key] = value
    try:
        return dataclasses.replace(setup, **clean)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


PLAN_KEYS = {"experiment", "eps", "replicates", "seed", "delta", "output", "setup", "variants"}


def plan_from_dict(raw: dict, where: str = "<plan>", overrides: dict | None = None) -> ExperimentPlan:
    raw = dict(raw)
    unknown = set(raw) - PLAN_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown top-level key(s) {sorted(unknown)}")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    kind = raw.get("experiment")
    if kind not in SETUPS:
        raise ConfigError(f"{where}: 'experiment' must be one of {sorted(SETUPS)}, got {kind!r}")
    setup = override_setup(SETUPS[kind](), raw.get("setup", {}), f"{where}: [setup]")
    eps = raw.get("eps", [])
    eps = tuple(float(e) for e in (eps if isinstance(eps, (list, tuple)) else [eps]))
    variants = raw.get("variants", [])
    if not isinstance(variants, list) or not all(isinstance(v, dict) for v in variants):
        raise ConfigError(f"{where}: 'variants' must be an array of tables")
    try:
        plan = ExperimentPlan(kind, eps, setup, tuple(variants), int(raw.get("replicates", 1)),
                              int(raw.get("seed", 0)), raw.get("delta"), raw.get("output"))
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from None
    plan.setups()  # validate variant fields early
    return plan


def load_toml(path: str | Path) -> dict:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_plan(path: str | Path, overrides: dict | None = None) -> ExperimentPlan:
    return plan_from_dict(load_toml(path), str(path), overrides)


def worker_count() -> int:
    raw = os.environ.get("ELDP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ELDP_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"ELDP_THREADS must be >= 1, got {n}")
    return n


def timed(fn, *args):
    start = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - start


def _run_cell(args) -> dict:
    kind, setup, eps, delta, seed, timing = args
    row, wall = timed(TRIALS[kind], setup, eps, delta, seed)
    if timing:
        row["wall_time"] = wall
    return row


def run_plan(plan: ExperimentPlan, *, timing: bool = False, workers: int | None = None) -> list[dict]:
    """All rows of the plan, ordered by variant, then eps, then replicate.

    Wall-clock time is added only when ``timing`` is set, since it would
    otherwise break byte-identical reruns.
    """
    cells = [(plan.experiment, setup, eps, plan.delta_for(setup), plan.seed + r, timing)
             for setup in plan.setups() for eps in plan.eps for r in range(plan.replicates)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
            return list(pool.map(_run_cell, cells, chunksize=max(1, len(cells) // (4 * workers))))
    return [_run_cell(c) for c in cells]


# ---------------------------------------------------------------- tables

def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(rows: list[dict], fh=None, columns: list[str] | None = None) -> str:
    """Write rows as CSV (to ``fh`` if given) and return the text."""
    if columns is None:
        columns = list(rows[0]) if rows else []
        for row in rows:
            columns += [c for c in row if c not in columns]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c, "")) for c in columns])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def read_csv(path_or_fh) -> list[dict]:
    if isinstance(path_or_fh, (str, Path)):
        with open(path_or_fh, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    return list(csv.DictReader(path_or_fh))


CI_MULTIPLIER = 1.64


def summarize(rows: list[dict], by: list[str], value: str) -> list[dict]:
    """Mean, standard error and 1.64-stderr half-width of ``value`` per ``by`` cell, in first-seen order."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        try:
            key = tuple(row[c] for c in by)
            x = float(row[value])
        except KeyError as e:
            raise ConfigError(f"column {e.args[0]!r} not in table") from None
        groups.setdefault(key, []).append(x)
    out = []
    for key, xs in groups.items():
        xs = np.asarray(xs)
        se = float(xs.std(ddof=1) / math.sqrt(xs.size)) if xs.size > 1 else 0.0
        out.append({**dict(zip(by, key)), "n": int(xs.size), "mean": float(xs.mean()),
                    "stderr": se, "ci_halfwidth": CI_MULTIPLIER * se})
    return out
