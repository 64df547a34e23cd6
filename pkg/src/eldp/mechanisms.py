"""Element-level release mechanisms for count data.

User data arrive as an ``(n, d)`` array of item counts (one row per user).
Partitions are passed either as an :class:`ElementPartition` over column
indices ``0..d-1`` or directly as an array of 0-based cluster labels.
Every randomized function takes ``seed``: an int, a ``SeedSequence`` or a
``numpy.random.Generator``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accountant import gaussian_sigma_squared
from .errors import DimensionError, DomainError
from .partition import ElementPartition


@dataclass(frozen=True)
class NoiseSpec:
    """Noise multiplier ``sigma`` and clip/projection radius ``rho``."""

    sigma: float
    rho: float = 1.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise DomainError(f"sigma must be >= 0, got {self.sigma}")
        if not self.rho > 0:
            raise DomainError(f"rho must be > 0, got {self.rho}")

    @property
    def scale(self) -> float:
        return self.sigma * self.rho


@dataclass(frozen=True, eq=False)
class CountVector:
    counts: np.ndarray
    m: int

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or (counts < 0).any() or not np.array_equal(counts, np.round(counts)):
            raise DomainError("counts must be a vector of nonnegative integers")
        if counts.sum() != self.m:
            raise DomainError(f"counts sum to {counts.sum()}, expected m={self.m}")
        object.__setattr__(self, "counts", counts.astype(np.int64))

    @classmethod
    def of(cls, counts):
        counts = np.asarray(counts)
        return cls(counts, int(counts.sum()))


def as_count_matrix(S) -> np.ndarray:
    """Stack a list of :class:`CountVector` (or rows) into an ``(n, d)`` array."""
    if isinstance(S, np.ndarray):
        X = S
    else:
        X = np.array([s.counts if isinstance(s, CountVector) else s for s in S])
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise DimensionError(f"expected an (n, d) count matrix, got shape {X.shape}")
    return X


def cluster_labels(part, d: int) -> np.ndarray:
    if isinstance(part, ElementPartition):
        return part.labels(range(d))
    labels = np.asarray(part, dtype=np.int64)
    if labels.shape != (d,):
        raise DimensionError(f"need one cluster label per coordinate ({d}), got shape {labels.shape}")
    return labels


def cluster_probs(p, part) -> np.ndarray:
    """Total probability of each cluster."""
    p = np.asarray(p, dtype=float)
    labels = cluster_labels(part, p.size)
    return np.bincount(labels, weights=p)


# ---------------------------------------------------------------- generic noise addition

def noisy_mean(values, rho: float, eps: float, delta: float | None = None, *,
               noise: str = "gaussian", seed=None) -> np.ndarray:
    """Mean of ``values`` plus noise scaled to element sensitivity ``rho``.

    Laplace noise has scale ``rho/eps`` per coordinate; Gaussian noise has
    variance ``rho**2 * gaussian_sigma_squared(eps, delta)``. ``eps=inf``
    returns the exact mean.
    """
    V = np.atleast_2d(np.asarray(values, dtype=float))
    if not eps > 0:
        raise DomainError(f"eps must be > 0, got {eps}")
    if not rho > 0:
        raise DomainError(f"rho must be > 0, got {rho}")
    mean = V.mean(axis=0)
    if math.isinf(eps):
        return mean
    rng = np.random.default_rng(seed)
    if noise == "laplace":
        return mean + rng.laplace(0.0, rho / eps, size=mean.shape)
    if noise == "gaussian":
        if delta is None:
            raise DomainError("the Gaussian mechanism needs delta")
        return mean + rho * math.sqrt(gaussian_sigma_squared(eps, delta)) * rng.standard_normal(mean.shape)
    raise DomainError(f"unknown noise {noise!r}")


# ---------------------------------------------------------------- heavy hitters

def indicator_vector(x) -> np.ndarray:
    """1 where the count is positive. Works row-wise on a count matrix."""
    x = x.counts if isinstance(x, CountVector) else np.asarray(x)
    return (x > 0).astype(np.int64)


def heavy_hitters(S, sigma: float, seed=None) -> np.ndarray:
    """Number of users holding each item, plus N(0, sigma^2) per coordinate.

    With one item per element the indicator sum has element sensitivity 1,
    so ``sigma = sqrt(gaussian_sigma_squared(eps, delta))`` gives
    (eps, delta) element-level DP and ``sigma**2 = alpha/eps`` gives
    (eps, alpha) Rényi DP.
    """
    if not sigma >= 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    X = as_count_matrix(S)
    H = indicator_vector(X).sum(axis=0).astype(float)
    if sigma:
        H += sigma * np.random.default_rng(seed).standard_normal(H.shape)
    return H


def heavy_hitters_sigma(eps: float, delta: float, level: str = "element", m: int | None = None) -> float:
    """Noise standard deviation for the indicator sum at the requested privacy level."""
    base = gaussian_sigma_squared(eps, delta)
    if level == "element":
        return math.sqrt(base)
    if level == "user":
        if m is None:
            raise DomainError("user-level noise needs the per-user count m")
        return math.sqrt(m * base)
    raise DomainError(f"unknown privacy level {level!r}")


def ordering_loss(H_hat, p, gamma_sep: float) -> int:
    """Count gamma-separated pairs that the released scores put in the wrong order.

    A pair counts when ``p_j - p_l >= gamma_sep`` yet ``H_hat_l > H_hat_j``;
    exact ties are not errors.
    """
    if not gamma_sep >= 0:
        raise DomainError(f"gamma_sep must be >= 0, got {gamma_sep}")
    H_hat = np.asarray(H_hat, dtype=float)
    p = np.asarray(p, dtype=float)
    if H_hat.shape != p.shape:
        raise DimensionError("H_hat and p differ in shape")
    separated = (p[:, None] - p[None, :]) >= gamma_sep
    inverted = H_hat[None, :] > H_hat[:, None]
    return int(np.count_nonzero(separated & inverted))


def order_threshold(n: int, m: int, d: int, t: float, sigma: float, p_max: float) -> float:
    """Smallest separation at which the expected ordering loss is at most ``t**2``.

    Valid when ``p_max <= 1/(2m)`` and ``0 < t <= d``.
    """
    if not 0 < t <= d:
        raise DomainError(f"need 0 < t <= d, got t={t}, d={d}")
    L = math.log(d / t)
    return max(32.0 / (n * m) * L,
               4.0 * math.sqrt(2.0) * sigma / (n * m) * math.sqrt(L),
               12.0 * math.sqrt(2.0) / math.sqrt(5.0) * math.sqrt(p_max) / (m * math.sqrt(n)) * math.sqrt(L))


def indicator_moments(p, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form E[Y] and E[Y Y^T] for Y = 1(X), X ~ Multinomial(m, p)."""
    p = np.asarray(p, dtype=float)
    q = 1.0 - (1.0 - p) ** m
    pair = 1.0 - np.clip(1.0 - p[:, None] - p[None, :], 0.0, None) ** m
    second = q[:, None] + q[None, :] - pair
    np.fill_diagonal(second, q)
    return q, second


# ---------------------------------------------------------------- histograms

def project_clusters(v, rho: float, part) -> np.ndarray:
    """Scale each cluster's block of ``v`` into the l2 ball of radius ``rho``.

    ``v`` may be a vector or a matrix whose rows are projected independently.
    """
    if not rho > 0:
        raise DomainError(f"rho must be > 0, got {rho}")
    v = np.asarray(v, dtype=float)
    V = np.atleast_2d(v)
    labels = cluster_labels(part, V.shape[1])
    K = int(labels.max()) + 1
    sq = np.zeros((V.shape[0], K))
    np.add.at(sq.T, labels, (V**2).T)
    norms = np.sqrt(sq)
    with np.errstate(divide="ignore"):
        scale = np.where(norms > rho, rho / norms, 1.0)
    out = V * scale[:, labels]
    return out.reshape(v.shape)


def histogram_mechanism(S, rho: float, part, sigma: float, n: int | None = None, seed=None) -> np.ndarray:
    """Mean of the cluster-projected count vectors plus N(0, (rho sigma / n)^2 I).

    The projected summand moves by at most ``sqrt(2) rho`` when one cluster of a
    user's data changes; :func:`histogram_sigma` folds that factor into ``sigma``.
    """
    X = as_count_matrix(S)
    if n is None:
        n = X.shape[0]
    if n != X.shape[0]:
        raise DimensionError(f"n={n} but the sample has {X.shape[0]} users")
    if not sigma >= 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    out = project_clusters(X, rho, part).sum(axis=0) / n
    if sigma:
        out += rho * sigma / n * np.random.default_rng(seed).standard_normal(out.shape)
    return out


def choose_rho(m: int, cluster_probs, t: float) -> float:
    """Projection radius satisfying ``rho >= min(3 m P(c) + 3 ln m + t, m)`` for every cluster."""
    P = np.asarray(cluster_probs, dtype=float)
    if m < 1 or not t >= 0:
        raise DomainError(f"need m >= 1 and t >= 0, got m={m}, t={t}")
    return float(np.max(np.minimum(3.0 * m * P + 3.0 * math.log(m) + t, m)))


def histogram_sigma(eps: float, delta: float) -> float:
    """Noise multiplier for :func:`histogram_mechanism` at (eps, delta).

    The projected summand has element sensitivity ``sqrt(2) rho``, so the
    unit-sensitivity Gaussian multiplier is scaled by ``sqrt(2)``.
    """
    return math.sqrt(2.0 * gaussian_sigma_squared(eps, delta))
