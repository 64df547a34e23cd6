"""Synthetic worlds for the simulation experiments, plus the error metrics they report."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .optim import LabeledSample


@dataclass(frozen=True, eq=False)
class MultinomialWorld:
    """``n`` users, each drawing ``m`` items from ``p`` over ``d`` items; ``labels`` are 0-based clusters."""

    n: int
    m: int
    p: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or (p < 0).any() or not math.isclose(p.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
            raise DomainError("p must be a probability vector")
        if self.n < 1 or self.m < 1:
            raise DomainError("n and m must be positive")
        labels = np.zeros(p.size, dtype=np.int64) if self.labels is None else np.asarray(self.labels, np.int64)
        if labels.shape != p.shape:
            raise DimensionError("need one cluster label per item")
        object.__setattr__(self, "p", p / p.sum())
        object.__setattr__(self, "labels", labels)

    @property
    def d(self) -> int:
        return self.p.size

    @property
    def K(self) -> int:
        return int(self.labels.max()) + 1

    def cluster_probs(self) -> np.ndarray:
        return np.bincount(self.labels, weights=self.p, minlength=self.K)

    def with_labels(self, labels) -> "MultinomialWorld":
        return MultinomialWorld(self.n, self.m, self.p, labels)


def zipf_probs(d: int, s: float = 1.0, offset: float = 0.0) -> np.ndarray:
    w = (np.arange(1, d + 1) + offset) ** (-float(s))
    return w / w.sum()


def linear_probs(d: int) -> np.ndarray:
    """Linearly decreasing probabilities with p_1 = 2/(d+1) and p_d = 2/(d(d+1))."""
    w = np.arange(d, 0, -1, dtype=float)
    return w / w.sum()


def block_labels(d: int, K: int) -> np.ndarray:
    """0-based labels cutting ``0..d-1`` into ``K`` contiguous near-equal blocks."""
    if not 1 <= K <= d:
        raise DomainError(f"need 1 <= K <= d, got K={K}, d={d}")
    return np.arange(d) * K // d


def strided_labels(d: int, K: int) -> np.ndarray:
    """0-based labels ``j mod K``, spreading heavy items across clusters."""
    if not 1 <= K <= d:
        raise DomainError(f"need 1 <= K <= d, got K={K}, d={d}")
    return np.arange(d) % K


def gen_multinomial(world: MultinomialWorld, seed=None) -> np.ndarray:
    """``(n, d)`` integer count matrix, one Multinomial(m, p) row per user."""
    rng = np.random.default_rng(seed)
    return rng.multinomial(world.m, world.p, size=world.n)


def uniform_sphere(rng: np.random.Generator, size: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((size, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@dataclass(frozen=True)
class LogisticWorld:
    """Users holding labelled points near ``coverage`` of ``K`` element centres.

    Features are ``centre + radius_scale * U`` with ``U`` uniform on the sphere,
    so their norm is at most ``1 + radius_scale``. Labels follow a logistic
    model with a unit-norm ``theta_star`` (or the zero vector when
    ``null_model`` is set).
    """

    dim: int = 10
    K: int = 10
    n: int = 1000
    m_user: int = 50
    coverage: int = 5
    radius_scale: float = 1.0
    null_model: bool = False

    def __post_init__(self):
        if not 1 <= self.coverage <= self.K:
            raise DomainError(f"coverage must lie in [1, K={self.K}], got {self.coverage}")
        if self.m_user < self.coverage:
            raise DomainError("each user needs at least one point per covered cluster")
        if min(self.dim, self.n) < 1 or self.radius_scale < 0:
            raise DomainError("invalid logistic world")

    @property
    def feature_bound(self) -> float:
        return 1.0 + self.radius_scale


@dataclass
class LogisticData:
    sample: LabeledSample
    theta_star: np.ndarray
    centers: np.ndarray


def gen_logistic(world: LogisticWorld, seed=None) -> LogisticData:
    """Draw centres, ``theta_star`` and every user's labelled points.

    Each user covers ``world.coverage`` clusters chosen uniformly without
    replacement; every covered cluster gets at least one point and the rest
    are assigned uniformly among the user's clusters.
    """
    rng = np.random.default_rng(seed)
    centers = uniform_sphere(rng, world.K, world.dim)
    theta_star = np.zeros(world.dim) if world.null_model else uniform_sphere(rng, 1, world.dim)[0]
    n, m, k = world.n, world.m_user, world.coverage
    chosen = np.argsort(rng.random((n, world.K)), axis=1)[:, :k]
    slot = np.concatenate([np.tile(np.arange(k), (n, 1)), rng.integers(0, k, size=(n, m - k))], axis=1)
    slot = rng.permuted(slot, axis=1)
    clusters = np.take_along_axis(chosen, slot, axis=1).reshape(-1)
    X = centers[clusters] + world.radius_scale * uniform_sphere(rng, n * m, world.dim)
    prob_pos = 1.0 / (1.0 + np.exp(-(X @ theta_star)))
    y = np.where(rng.random(n * m) < prob_pos, 1.0, -1.0)
    offsets = np.arange(n + 1) * m
    return LogisticData(LabeledSample(X, y, clusters, offsets, world.K), theta_star, centers)


def gen_location(n: int, mean, cov, seed=None) -> LabeledSample:
    """One Gaussian point per user, all in a single element (quadratic M-estimation)."""
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    X = rng.multivariate_normal(mean, np.asarray(cov, dtype=float), size=n)
    return LabeledSample(X, np.zeros(n), np.zeros(n, dtype=np.int64), np.arange(n + 1), 1)


def l2_error(theta_hat, theta_star) -> float:
    return float(np.linalg.norm(np.asarray(theta_hat, float) - np.asarray(theta_star, float)))


def mse_ratio(H_hat, H0, H1) -> float:
    """``||H_hat - H0||^2 / ||H1 - H0||^2``: private error relative to a baseline estimate."""
    H_hat, H0, H1 = (np.asarray(v, dtype=float) for v in (H_hat, H0, H1))
    num = float(np.sum((H_hat - H0) ** 2))
    den = float(np.sum((H1 - H0) ** 2))
    if den == 0:
        if num == 0:
            return 0.0
        raise DomainError("baseline error is zero")
    return num / den
