"""Command-line entry point: ``eldp <subcommand> ...``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 for
numerical failures (quadrature, divergent iterates).
"""
from __future__ import annotations

import argparse
import csv
import math
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import experiments as ex
from .accountant import gaussian_sigma_squared
from .errors import AssignmentError, ConfigError, DimensionError, DomainError, NumericError
from .mechanisms import heavy_hitters, histogram_mechanism, histogram_sigma
from .optim import LabeledSample
from .partition import ElementPartition, read_partition, write_partition
from .simdata import MultinomialWorld, block_labels, gen_logistic, gen_multinomial, linear_probs, \
    strided_labels, zipf_probs

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


# ---------------------------------------------------------------- file formats

def read_counts(path) -> tuple[list[str], np.ndarray]:
    """Counts CSV: optional header of item ids, then one row of nonnegative integers per user."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise ConfigError(f"{path}: no rows")
    try:
        [float(x) for x in rows[0]]
        items = [str(j) for j in range(len(rows[0]))]
    except ValueError:
        items, rows = [x.strip() for x in rows[0]], rows[1:]
    if not rows:
        raise ConfigError(f"{path}: header but no users")
    out = np.empty((len(rows), len(items)), dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != len(items):
            raise ConfigError(f"{path}:{i + 2 if items[0] != '0' else i + 1}: expected {len(items)} columns")
        try:
            vals = [int(x) for x in row]
        except ValueError:
            raise ConfigError(f"{path}: row {i + 1}: counts must be integers") from None
        if min(vals) < 0:
            raise ConfigError(f"{path}: row {i + 1}: counts must be nonnegative")
        out[i] = vals
    return items, out


def write_counts(items, counts, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(items)
    w.writerows(counts.tolist())


PAIR_PREFIX = ("user", "cluster", "label")


def write_pairs(sample: LabeledSample, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(list(PAIR_PREFIX) + [f"x{j}" for j in range(sample.dim)])
    for u, c, y, x in zip(sample.owner, sample.clusters, sample.labels, sample.features):
        w.writerow([int(u), int(c), ex.format_value(float(y))] + [ex.format_value(float(v)) for v in x])


def read_pairs(path) -> LabeledSample:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:3]) != PAIR_PREFIX:
            raise ConfigError(f"{path}: header must start with {','.join(PAIR_PREFIX)}")
        rows = list(reader)
    try:
        arr = np.array([[float(x) for x in r] for r in rows])
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    if arr.ndim != 2 or arr.shape[1] != len(header):
        raise ConfigError(f"{path}: ragged rows")
    users = arr[:, 0].astype(np.int64)
    if np.any(np.diff(users) < 0) or (users.size and users[0] != 0):
        raise ConfigError(f"{path}: rows must be grouped by user, numbered from 0")
    offsets = np.searchsorted(users, np.arange(users.max() + 2))
    return LabeledSample(arr[:, 3:], arr[:, 2], arr[:, 1].astype(np.int64), offsets)


def read_vector(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        vals = [float(x) for line in fh if line.strip() and not line.startswith("#") for x in line.split(",")]
    return np.array(vals)


def _budget_line(**kv) -> str:
    return "# budget " + " ".join(f"{k}={ex.format_value(v)}" for k, v in kv.items()) + "\n"


def _release_csv(items, values, fh, **budget) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["item", "value"])
    for item, v in zip(items, values):
        w.writerow([item, ex.format_value(float(v))])
    fh.write(_budget_line(**budget))


# ---------------------------------------------------------------- subcommands

def cmd_account(args) -> None:
    raw = ex.load_toml(args.plan)
    delta = args.delta if args.delta is not None else raw.get("delta")
    if delta is None:
        raise ConfigError(f"{args.plan}: no delta given")
    events = raw.get("events")
    if not isinstance(events, list):
        raise ConfigError(f"{args.plan}: expected an [[events]] array")
    try:
        row = ex.account_events(events, float(delta))
    except ConfigError as e:
        raise ConfigError(f"{args.plan}: {e}") from None
    with _output(args.output) as fh:
        ex.write_csv([row], fh)


def _partition_for(items, path) -> tuple[ElementPartition, np.ndarray]:
    part = read_partition(path)
    return part, part.labels(items)


def cmd_heavy_hitters(args) -> None:
    items, counts = read_counts(args.counts)
    part, _ = _partition_for(items, args.partition)
    # an element of size s can flip s indicators of one user
    sensitivity = math.sqrt(int(part.sizes().max()))
    rho = sensitivity if args.rho is None else args.rho
    if rho < sensitivity:
        raise DomainError(f"--rho {rho} is below the partition's element sensitivity {sensitivity:.6g}")
    delta = ex.default_delta(len(counts)) if args.delta is None else args.delta
    sigma = rho * math.sqrt(gaussian_sigma_squared(args.eps, delta))
    H = heavy_hitters(counts, sigma, seed=args.seed)
    with _output(args.output) as fh:
        _release_csv(items, H, fh, epsilon=args.eps, delta=delta, sigma=sigma, sensitivity=rho)


def cmd_histogram(args) -> None:
    items, counts = read_counts(args.counts)
    _, labels = _partition_for(items, args.partition)
    delta = ex.default_delta(len(counts)) if args.delta is None else args.delta
    sigma = histogram_sigma(args.eps, delta)
    out = histogram_mechanism(counts, args.rho, labels, sigma, seed=args.seed)
    with _output(args.output) as fh:
        _release_csv(items, out, fh, epsilon=args.eps, delta=delta, sigma=sigma, rho=args.rho)


SGD_FLAGS = ("n", "m", "K", "k_per_user", "dim", "q", "sigma", "rho", "alpha0", "beta", "T",
             "privacy", "radius", "radius_scale")


def cmd_sgd_sim(args) -> None:
    raw = ex.load_toml(args.config).get("setup", {}) if args.config else {}
    flags = {k: getattr(args, k) for k in SGD_FLAGS if getattr(args, k) is not None}
    setup = ex.override_setup(ex.override_setup(ex.LogisticSetup(), raw, f"{args.config}: [setup]"), flags, "flags")
    if args.data:
        sample = read_pairs(args.data)
        theta_star = read_vector(args.truth) if args.truth else None
        delta = ex.default_delta(sample.n) if args.delta is None else args.delta
        run = lambda seed: ex.logistic_run(sample, theta_star, setup, args.eps, delta, seed)
    else:
        delta = ex.default_delta(setup.n) if args.delta is None else args.delta
        run = lambda seed: ex.logistic_trial(setup, args.eps, delta, seed)
    if args.replicates < 1:
        raise ConfigError("--replicates must be >= 1")
    rows = []
    for r in range(args.replicates):
        row, wall = ex.timed(run, args.seed + r)
        if args.timing:
            row["wall_time"] = wall
        rows.append(row)
    with _output(args.output) as fh:
        ex.write_csv(rows, fh)


PROBS = {"uniform": lambda d, s: np.full(d, 1.0 / d), "linear": lambda d, s: linear_probs(d),
         "zipf": lambda d, s: zipf_probs(d, s)}
LABELS = {"block": block_labels, "strided": strided_labels}


def cmd_gen(args) -> None:
    if args.kind == "counts":
        p = PROBS[args.probs](args.d, args.zipf_s)
        labels = LABELS[args.labels](args.d, args.K)
        counts = gen_multinomial(MultinomialWorld(args.n, args.m, p, labels), ex.data_seed(args.seed))
        items = [f"i{j}" for j in range(args.d)]
        with _output(args.output) as fh:
            write_counts(items, counts, fh)
        if args.partition:
            write_partition(ElementPartition.from_labels(labels + 1, items, args.K), args.partition)
    else:
        world = ex.LogisticSetup(n=args.n, m=args.m, K=args.K, k_per_user=args.k_per_user, dim=args.dim).world()
        data = gen_logistic(world, ex.data_seed(args.seed))
        with _output(args.output) as fh:
            write_pairs(data.sample, fh)
        if args.truth:
            Path(args.truth).write_text(",".join(ex.format_value(float(v)) for v in data.theta_star) + "\n")


def cmd_run_plan(args) -> None:
    overrides = {"replicates": args.replicates, "seed": args.seed, "output": args.output}
    if args.eps:
        overrides["eps"] = args.eps
    plan = ex.load_plan(args.plan, overrides)
    rows = ex.run_plan(plan, timing=args.timing)
    with _output(plan.output) as fh:
        ex.write_csv(rows, fh)


def cmd_summarize(args) -> None:
    rows = ex.read_csv(args.results)
    by = [c for c in args.by.split(",") if c]
    with _output(args.output) as fh:
        ex.write_csv(ex.summarize(rows, by, args.value), fh)


# ---------------------------------------------------------------- parser

def _positive(kind):
    def parse(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eldp", description="Element-level differential privacy toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("account", help="compose mechanism events into (epsilon, delta)")
    p.add_argument("plan", help="TOML file with delta and an [[events]] array")
    p.add_argument("--delta", type=float)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_account)

    for name, func, help_ in [("heavy-hitters", cmd_heavy_hitters, "noisy per-item user counts"),
                              ("histogram", cmd_histogram, "cluster-projected noisy mean histogram")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("counts", help="counts CSV, one row per user")
        p.add_argument("--partition", required=True, help="item<TAB>cluster file")
        p.add_argument("--eps", type=_positive(float), required=True)
        p.add_argument("--delta", type=float)
        p.add_argument("--rho", type=_positive(float), required=name == "histogram")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("-o", "--output")
        p.set_defaults(func=func)

    p = sub.add_parser("sgd-sim", help="element-level private SGD on simulated logistic data")
    p.add_argument("--config", help="TOML file whose [setup] table gives defaults")
    for flag, kind in [("n", int), ("m", int), ("K", int), ("k-per-user", int), ("dim", int), ("q", float),
                       ("sigma", float), ("rho", float), ("alpha0", float), ("beta", float), ("T", int),
                       ("radius", float), ("radius-scale", float)]:
        p.add_argument(f"--{flag}", type=kind)
    p.add_argument("--eps", type=_positive(float), default=2.0)
    p.add_argument("--delta", type=float)
    p.add_argument("--privacy", choices=["element", "user", "none"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--data", help="labelled-pairs CSV from `eldp gen logistic` instead of a fresh draw")
    p.add_argument("--truth", help="file with the true parameter, comma separated")
    p.add_argument("--timing", action="store_true", help="add a wall_time column")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_sgd_sim)

    p = sub.add_parser("gen", help="write synthetic data files")
    p.add_argument("kind", choices=["counts", "logistic"])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--d", type=int, default=50)
    p.add_argument("--K", type=int, default=5)
    p.add_argument("--k-per-user", type=int, default=2)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--probs", choices=sorted(PROBS), default="zipf")
    p.add_argument("--zipf-s", type=float, default=1.0)
    p.add_argument("--labels", choices=sorted(LABELS), default="block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--partition", help="also write the item partition here (counts only)")
    p.add_argument("--truth", help="also write the true parameter here (logistic only)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run-plan", help="run a TOML experiment plan to CSV")
    p.add_argument("plan")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--eps", type=float, nargs="+")
    p.add_argument("--timing", action="store_true")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_run_plan)

    p = sub.add_parser("summarize", help="mean and 1.64-stderr bands per cell")
    p.add_argument("results")
    p.add_argument("--by", required=True, help="comma-separated grouping columns")
    p.add_argument("--value", required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_summarize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, DomainError, DimensionError, AssignmentError) as e:
        msg = e.args[0] if isinstance(e, AssignmentError) and e.args else e
        print(f"eldp: error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"eldp: numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
