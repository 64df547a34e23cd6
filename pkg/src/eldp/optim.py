"""Element-level private stochastic gradient method.

Each user's data are split by element; every non-empty element takes its own
projected gradient step from the shared model and the resulting gradient
mappings are clipped to ``rho`` before being summed. Summing clipped per-element
steps bounds the element sensitivity of a user's update by ``2 rho``, which
is what the moments accountant needs.

Learning data live in a :class:`LabeledSample`: flat arrays of features,
labels, cluster ids and user ids, so a subsample's gradients are computed in
one vectorized pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .accountant import SubsampleSpec, sgd_privacy
from .errors import DimensionError, DomainError, InstabilityError
from .mechanisms import NoiseSpec


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossSpec:
    """Per-example loss and gradient, vectorized over rows of ``X``.

    ``lipschitz`` bounds the gradient norm over the parameter domain; it is
    the smallest ``rho`` at which clipping never activates.
    """

    name: str
    value: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    lipschitz: float = math.inf


def logistic_loss(feature_bound: float = 2.0) -> LossSpec:
    """``log(1 + exp(-y <x, theta>))`` with labels in {-1, +1}."""

    def value(theta, X, y):
        return np.logaddexp(0.0, -y * (X @ theta))

    def grad(theta, X, y):
        z = -y * (X @ theta)
        # d/dtheta = -y x * sigmoid(z)
        return (-y * _sigmoid(z))[:, None] * X

    return LossSpec("logistic", value, grad, float(feature_bound))


def quadratic_loss(A) -> LossSpec:
    """``0.5 (theta - x)^T A (theta - x)``; labels are ignored."""
    A = np.atleast_2d(np.asarray(A, dtype=float))

    def value(theta, X, y):
        D = theta[None, :] - X
        return 0.5 * np.einsum("ij,jk,ik->i", D, A, D)

    def grad(theta, X, y):
        return (theta[None, :] - X) @ A.T

    return LossSpec("quadratic", value, grad)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


# ---------------------------------------------------------------- data

@dataclass(frozen=True, eq=False)
class LabeledUser:
    """One user's labelled points and the element each point belongs to (0-based)."""

    features: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.size == 0:
            X = X.reshape(0, X.shape[1] if X.ndim == 2 else 0)
        elif X.ndim != 2:
            raise DimensionError(f"features must be an (m, p) array, got shape {X.shape}")
        y = np.asarray(self.labels, dtype=float).reshape(-1)
        c = np.asarray(self.clusters, dtype=np.int64).reshape(-1)
        if not (len(X) == len(y) == len(c)):
            raise DimensionError("features, labels and clusters differ in length")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "clusters", c)

    @classmethod
    def from_partition(cls, features, labels, items, part):
        """Assign clusters through an :class:`ElementPartition` keyed by item id."""
        return cls(features, labels, part.labels(items))

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """All users' points stored contiguously; user ``u`` owns rows ``offsets[u]:offsets[u+1]``."""

    features: np.ndarray
    labels: np.ndarray
    clusters: np.ndarray
    offsets: np.ndarray
    n_clusters: int = field(default=0)

    def __post_init__(self):
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.int64))
        object.__setattr__(self, "clusters", np.asarray(self.clusters, dtype=np.int64))
        if self.offsets[0] != 0 or self.offsets[-1] != len(self.labels) or np.any(np.diff(self.offsets) < 0):
            raise DimensionError("offsets must run monotonically from 0 to the number of points")
        if not self.n_clusters:
            object.__setattr__(self, "n_clusters", int(self.clusters.max()) + 1 if len(self.clusters) else 1)
        owner = np.repeat(np.arange(self.n), np.diff(self.offsets))
        object.__setattr__(self, "owner", owner)
        # dense id of each point's (user, element) group; ``order`` lists rows by group
        # and only permutes within users, since ids sort by owner first
        _, group = np.unique(owner * self.n_clusters + self.clusters, return_inverse=True)
        group = group.reshape(-1)
        object.__setattr__(self, "group", group)
        object.__setattr__(self, "order", np.argsort(group, kind="stable"))

    @classmethod
    def from_users(cls, users, n_clusters: int = 0):
        users = list(users)
        if not users:
            raise DomainError("a sample needs at least one user")
        p = max(u.features.shape[1] for u in users)
        X = np.concatenate([u.features.reshape(len(u), p) for u in users])
        y = np.concatenate([u.labels for u in users])
        c = np.concatenate([u.clusters for u in users])
        offsets = np.concatenate([[0], np.cumsum([len(u) for u in users])])
        return cls(X, y, c, offsets, n_clusters)

    @property
    def n(self) -> int:
        return len(self.offsets) - 1

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def user(self, u: int) -> LabeledUser:
        a, b = self.offsets[u], self.offsets[u + 1]
        return LabeledUser(self.features[a:b], self.labels[a:b], self.clusters[a:b])

    def users(self):
        return [self.user(u) for u in range(self.n)]

    def permuted(self, perm) -> "LabeledSample":
        return LabeledSample.from_users([self.user(int(u)) for u in perm], self.n_clusters)

    def max_user_size(self) -> int:
        return int(np.diff(self.offsets).max())


# ---------------------------------------------------------------- updates

def project_ball(v: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean projection onto the centred l2 ball (applied row-wise for matrices)."""
    v = np.asarray(v, dtype=float)
    if radius == math.inf:
        return v
    if v.ndim == 1:
        norm = math.sqrt(float(v @ v))
        return v if norm <= radius else v * (radius / norm)
    norms = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    return v * (radius / np.maximum(norms, radius))


def element_loss(theta, user: LabeledUser, loss: LossSpec) -> float:
    """Sum over the user's non-empty elements of the mean loss inside each element."""
    if not len(user):
        return 0.0
    vals = loss.value(np.asarray(theta, dtype=float), user.features, user.labels)
    ids, inv = np.unique(user.clusters, return_inverse=True)
    sums = np.bincount(inv, weights=vals)
    counts = np.bincount(inv)
    return float(np.sum(sums / counts))


def _group_updates(theta0, X, y, group, alpha, rho, loss, radius):
    """Clipped gradient mapping for each run of equal ids in the sorted ``group``; returns (steps, clipped flags)."""
    G = loss.grad(theta0, X, y)
    starts = np.flatnonzero(np.concatenate(([True], group[1:] != group[:-1])))
    counts = np.concatenate((starts[1:], [group.size])) - starts
    mean_grad = np.add.reduceat(G, starts, axis=0) / counts[:, None]
    theta_plus = project_ball(theta0[None, :] - alpha * mean_grad, radius)
    delta = (theta_plus - theta0[None, :]) / alpha
    norms = np.sqrt((delta * delta).sum(axis=1))
    return delta * (rho / np.maximum(norms, rho))[:, None], norms > rho


def element_update(theta0, user: LabeledUser, alpha: float, rho: float, loss: LossSpec,
                   radius: float = math.inf, *, return_clipped: bool = False):
    """Sum over non-empty elements of the rho-clipped projected-gradient mapping.

    Points in the direction of descent: for an interior ``theta0`` and no
    clipping it equals minus the sum of per-element mean gradients.
    """
    if not alpha > 0 or not rho > 0:
        raise DomainError(f"alpha and rho must be > 0, got alpha={alpha}, rho={rho}")
    theta0 = np.asarray(theta0, dtype=float)
    if not len(user):
        out = np.zeros_like(theta0)
        return (out, np.zeros(0, bool)) if return_clipped else out
    if user.features.shape[1] != theta0.size:
        raise DimensionError(f"features have dimension {user.features.shape[1]}, theta has {theta0.size}")
    order = np.argsort(user.clusters, kind="stable")
    steps, clipped = _group_updates(theta0, user.features[order], user.labels[order], user.clusters[order],
                                    alpha, rho, loss, radius)
    out = steps.sum(axis=0)
    return (out, clipped) if return_clipped else out


def draw_mask(sub: SubsampleSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Which users take part in one step: Bernoulli(q) each, or a uniform q n subset."""
    if sub.mode == "poisson":
        return rng.random(n) < sub.q
    if sub.n is not None and sub.n != n:
        raise DimensionError(f"fixed subsampling was set up for n={sub.n}, sample has {n}")
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=sub.m, replace=False)] = True
    return mask


def subsampled_sum(sample: LabeledSample, theta0, alpha: float, noise: NoiseSpec, sub: SubsampleSpec,
                   loss: LossSpec, radius: float = math.inf, seed=None, *, mask=None) -> np.ndarray:
    """Sum of element updates over a random subsample of users, plus N(0, (rho sigma)^2 I).

    ``mask`` fixes the subsample (boolean, one entry per user); otherwise it is
    drawn from ``seed``.
    """
    rng = np.random.default_rng(seed)
    theta0 = np.asarray(theta0, dtype=float)
    if mask is None:
        mask = draw_mask(sub, sample.n, rng)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (sample.n,):
        raise DimensionError(f"mask must have one entry per user ({sample.n})")
    total = _masked_sum(sample, theta0, alpha, noise.rho, mask, loss, radius)
    if noise.sigma:
        total = total + noise.rho * noise.sigma * rng.standard_normal(theta0.shape)
    return total


def _masked_sum(sample, theta0, alpha, rho, mask, loss, radius):
    rows = sample.order[mask[sample.owner]]
    if not rows.size:
        return np.zeros_like(theta0)
    steps, _ = _group_updates(theta0, sample.features[rows], sample.labels[rows], sample.group[rows],
                              alpha, rho, loss, radius)
    return steps.sum(axis=0)


# ---------------------------------------------------------------- the iteration

@dataclass(frozen=True)
class SgdConfig:
    alpha0: float
    beta: float
    T: int
    subsample: SubsampleSpec
    noise: NoiseSpec
    radius: float = 10.0
    seed: int | None = 0
    theta0: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise DomainError(f"alpha0 must be > 0, got {self.alpha0}")
        if not 0.5 < self.beta < 1:
            raise DomainError(f"beta must lie in (1/2, 1), got {self.beta}")
        if self.T < 0 or int(self.T) != self.T:
            raise DomainError(f"T must be a nonnegative integer, got {self.T}")
        if not self.radius > 0:
            raise DomainError(f"radius must be > 0, got {self.radius}")

    def stepsize(self, k: int) -> float:
        return self.alpha0 * k ** (-self.beta)


@dataclass
class SgdResult:
    trajectory: np.ndarray  # (T + 1, p): theta_1 .. theta_{T+1}
    theta_bar: np.ndarray   # mean of the T iterates produced by updates

    @property
    def iterations(self) -> int:
        return len(self.trajectory) - 1

    def privacy(self, delta: float, q: float, sigma: float):
        return sgd_privacy(self.iterations, q, sigma, delta)


def run_private_sgd(sample: LabeledSample, config: SgdConfig, loss: LossSpec, *, masks=None) -> SgdResult:
    """Run ``config.T`` private steps ``theta <- proj(theta + a_k / (q n) * M(S; theta))``.

    The update adds the subsampled sum because element updates already point
    downhill. Subsample masks and Gaussian noise come from separate child
    streams of ``config.seed``; passing ``masks`` (shape ``(T, n)``) pins the
    subsample draws while leaving the noise stream unchanged.
    """
    p = sample.dim
    theta = np.zeros(p) if config.theta0 is None else np.asarray(config.theta0, dtype=float)
    if theta.shape != (p,):
        raise DimensionError(f"theta0 must have length {p}")
    theta = project_ball(theta, config.radius)
    mask_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(2)
    mask_rng, noise_rng = np.random.default_rng(mask_ss), np.random.default_rng(noise_ss)
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if masks.shape != (config.T, sample.n):
            raise DimensionError(f"masks must have shape ({config.T}, {sample.n})")
    sub, noise = config.subsample, config.noise
    scale = 1.0 / (sub.q * sample.n)
    limit = 1e3 * config.radius
    traj = np.empty((config.T + 1, p))
    traj[0] = theta
    for k in range(1, config.T + 1):
        a_k = config.stepsize(k)
        mask = draw_mask(sub, sample.n, mask_rng) if masks is None else masks[k - 1]
        M = _masked_sum(sample, theta, a_k, noise.rho, mask, loss, config.radius)
        if noise.sigma:
            M = M + noise.rho * noise.sigma * noise_rng.standard_normal(p)
        step = theta + a_k * scale * M
        norm = math.sqrt(float(step @ step))
        if not np.isfinite(norm) or norm > limit:
            raise InstabilityError(f"iterate norm {norm:.3g} exceeded {limit:.3g} at step {k}")
        theta = project_ball(step, config.radius)
        traj[k] = theta
    theta_bar = traj[1:].mean(axis=0) if config.T else traj[0].copy()
    return SgdResult(traj, theta_bar)


# ---------------------------------------------------------------- privacy levels and asymptotics

def user_level_sigma(sigma_element: float, K: int, M: int) -> float:
    """Noise multiplier giving user-level privacy at the budget ``sigma_element`` gives element-level.

    A user's update has global sensitivity ``2 min(K, M) rho`` against element
    sensitivity ``2 rho``.
    """
    if K < 1 or M < 1:
        raise DomainError(f"K and M must be positive, got K={K}, M={M}")
    return sigma_element * min(K, M)


def predict_covariance(hessian, grad_cov, gamma_ratio: float, sigma: float = 0.0, rho: float = 1.0,
                       m_batch: int = 1, noise_cov=None) -> np.ndarray:
    """Asymptotic covariance of sqrt(n)(theta_bar - theta*).

    ``H^-1 (S + (S/m + rho^2 sigma^2 / m^2 Z) / gamma) H^-1`` with ``S`` the
    gradient covariance, ``Z`` the noise covariance (identity by default),
    ``m`` the fixed batch size and ``gamma`` the iterations-per-sample ratio.
    ``gamma_ratio=inf`` gives the sandwich ``H^-1 S H^-1``.
    """
    H = np.atleast_2d(np.asarray(hessian, dtype=float))
    S = np.atleast_2d(np.asarray(grad_cov, dtype=float))
    if H.shape != S.shape or H.shape[0] != H.shape[1]:
        raise DimensionError("hessian and grad_cov must be square and of equal shape")
    if not np.allclose(H, H.T):
        raise DomainError("hessian must be symmetric")
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise DomainError("hessian must be positive definite") from None
    if not gamma_ratio > 0 or m_batch < 1:
        raise DomainError(f"need gamma_ratio > 0 and m_batch >= 1, got {gamma_ratio}, {m_batch}")
    Z = np.eye(H.shape[0]) if noise_cov is None else np.atleast_2d(np.asarray(noise_cov, dtype=float))
    middle = S.copy()
    if math.isfinite(gamma_ratio):
        middle = middle + (S / m_batch + (rho * sigma / m_batch) ** 2 * Z) / gamma_ratio
    Hinv = np.linalg.inv(H)
    out = Hinv @ middle @ Hinv
    return 0.5 * (out + out.T)
