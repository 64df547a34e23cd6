"""Privacy budget arithmetic.

Covers Gaussian noise calibration, Rényi to (epsilon, delta) conversion,
group privacy, basic/advanced/Rényi composition, amplification by
subsampling, and the moments accountant for the subsampled Gaussian sum.

All sensitivities are in units of the clip radius: a Gaussian with noise
multiplier ``sigma`` means standard deviation ``rho * sigma`` for a query
whose element sensitivity is ``rho``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError, QuadratureError

# Conversion grid: fine near 1, log-spaced up to 256.
ALPHA_GRID: tuple[float, ...] = tuple(
    sorted(set([1.0 + k / 8 for k in range(1, 57)] + np.geomspace(2.0, 256.0, 40).tolist()))
)

QUAD_RTOL = 1e-8
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PrivacyParams:
    """An (epsilon, delta) guarantee; ``alpha`` records the Rényi order it came from, if any."""

    epsilon: float
    delta: float = 0.0
    alpha: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise DomainError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0.0 <= self.delta <= 1.0:
            raise DomainError(f"delta must lie in [0, 1], got {self.delta}")


@dataclass(frozen=True)
class RenyiCurve:
    """Rényi guarantee as (alpha, eps_alpha) points.

    ``fn`` optionally re-evaluates the curve at an arbitrary order; composition
    uses it to move curves onto a common grid without interpolating.
    """

    alphas: tuple[float, ...]
    eps: tuple[float, ...]
    fn: Callable[[float], float] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        alphas = tuple(float(a) for a in self.alphas)
        eps = tuple(float(e) for e in self.eps)
        if len(alphas) != len(eps):
            raise DomainError("alphas and eps differ in length")
        if any(a <= 1 for a in alphas):
            raise DomainError("Rényi orders must exceed 1")
        if any(b <= a for a, b in zip(alphas, alphas[1:])):
            raise DomainError("Rényi orders must be strictly increasing")
        if any(not e >= 0 for e in eps):
            raise DomainError("eps_alpha must be nonnegative")
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "eps", eps)

    @classmethod
    def from_function(cls, fn: Callable[[float], float], alphas: Iterable[float] = ALPHA_GRID):
        alphas = tuple(alphas)
        return cls(alphas, tuple(fn(a) for a in alphas), fn)

    def __len__(self) -> int:
        return len(self.alphas)

    def at(self, alpha: float) -> float:
        try:
            return self.eps[self.alphas.index(alpha)]
        except ValueError:
            if self.fn is None:
                raise DomainError(f"curve has no point at alpha={alpha} and cannot be re-evaluated") from None
            return float(self.fn(alpha))

    def scaled(self, factor: float) -> "RenyiCurve":
        fn = None if self.fn is None else (lambda a, f=self.fn: factor * f(a))
        return RenyiCurve(self.alphas, tuple(factor * e for e in self.eps), fn)


@dataclass(frozen=True)
class SubsampleSpec:
    """Poisson sampling at rate ``q``, or a uniform ``m``-of-``n`` subset."""

    mode: str
    q: float
    m: int | None = None
    n: int | None = None

    def __post_init__(self):
        if self.mode not in ("poisson", "fixed"):
            raise DomainError(f"unknown subsampling mode {self.mode!r}")
        if self.mode == "fixed":
            if self.m is None or self.n is None or not 1 <= self.m <= self.n:
                raise DomainError(f"fixed subsampling needs 1 <= m <= n, got m={self.m}, n={self.n}")
            object.__setattr__(self, "q", self.m / self.n)
        if not 0 < self.q <= 1:
            raise DomainError(f"sampling rate must lie in (0, 1], got {self.q}")

    @classmethod
    def poisson(cls, q: float):
        return cls("poisson", float(q))

    @classmethod
    def fixed(cls, m: int, n: int):
        return cls("fixed", m / n, int(m), int(n))


# ---------------------------------------------------------------- Gaussian basics

def gaussian_sigma_squared(eps: float, delta: float) -> float:
    """Per-unit-sensitivity variance giving (eps, delta)-DP for the Gaussian mechanism."""
    if not eps > 0:
        raise DomainError(f"eps must be > 0, got {eps}")
    if not 0 < delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    return (1.0 / eps if eps > 1 else 0.0) + 2.0 * math.log(1.0 / delta) / eps**2


def gaussian_renyi(mu_dist: float, sigma: float, alpha: float) -> float:
    """Order-alpha Rényi divergence between two Gaussians with common scale ``sigma``."""
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    return alpha * mu_dist**2 / (2.0 * sigma**2)


def gaussian_curve(sigma: float, sensitivity: float = 1.0, alphas: Iterable[float] = ALPHA_GRID) -> RenyiCurve:
    return RenyiCurve.from_function(lambda a: gaussian_renyi(sensitivity, sigma, a), alphas)


def renyi_to_dp(curve: RenyiCurve, delta: float | None = None, *, log_delta: float | None = None) -> PrivacyParams:
    """Best (epsilon, delta) over the curve's orders; pass ``log_delta`` for delta below ~1e-300."""
    if not len(curve):
        raise DomainError("empty Rényi curve")
    if log_delta is not None and delta is not None:
        raise DomainError("pass delta or log_delta, not both")
    if log_delta is None:
        if delta is None or not 0 < delta < 1:
            raise DomainError(f"delta must lie in (0, 1), got {delta}")
        log_delta = math.log(delta)
    elif not log_delta < 0:
        raise DomainError("log_delta must be negative")
    a = np.asarray(curve.alphas)
    vals = np.asarray(curve.eps) - log_delta / (a - 1.0)
    i = int(np.argmin(vals))
    return PrivacyParams(float(vals[i]), delta if delta is not None else math.exp(log_delta), float(a[i]))


# ---------------------------------------------------------------- composition

def compose_basic(params: Iterable[PrivacyParams]) -> PrivacyParams:
    params = list(params)
    eps = math.fsum(p.epsilon for p in params)
    delta = math.fsum(p.delta for p in params)
    return PrivacyParams(eps, min(delta, 1.0))


def compose_advanced(params: Iterable[PrivacyParams], delta0: float) -> PrivacyParams:
    if not 0 < delta0 <= 1:
        raise DomainError(f"delta0 must lie in (0, 1], got {delta0}")
    params = list(params)
    s2 = math.fsum(p.epsilon**2 for p in params)
    eps = 1.5 * s2 + math.sqrt(6.0 * s2 * math.log(1.0 / delta0))
    delta = delta0 + math.fsum(p.delta / (1.0 + math.exp(p.epsilon)) for p in params)
    return PrivacyParams(eps, min(delta, 1.0))


def compose_renyi(curves: Sequence[RenyiCurve], alphas: Iterable[float] | None = None) -> RenyiCurve:
    """Pointwise sum of eps_alpha; defaults to the union of the curves' orders."""
    curves = list(curves)
    if alphas is None:
        alphas = sorted(set().union(*(c.alphas for c in curves))) if curves else list(ALPHA_GRID)
    alphas = tuple(alphas)
    eps = tuple(math.fsum(c.at(a) for c in curves) for a in alphas)
    fns = [c.fn for c in curves]
    fn = None if any(f is None for f in fns) else (lambda a: math.fsum(f(a) for f in fns))
    return RenyiCurve(alphas, eps, fn)


def group_privacy(p: PrivacyParams, k: int) -> PrivacyParams:
    """Guarantee between samples at element distance ``k``."""
    if k < 1 or int(k) != k:
        raise DomainError(f"group size must be a positive integer, got {k}")
    if p.delta == 0:
        return PrivacyParams(k * p.epsilon, 0.0)
    log_delta = math.log(k) + (k - 1) * p.epsilon + math.log(p.delta)
    return PrivacyParams(k * p.epsilon, min(1.0, math.exp(min(log_delta, 0.0))))


def amplify_subsample(p: PrivacyParams, sub: SubsampleSpec) -> PrivacyParams:
    # both modes use the rate q; the fixed-size case takes q = m/n
    q = sub.q
    return PrivacyParams(math.log1p(q * math.expm1(p.epsilon)), q * p.delta)


# ---------------------------------------------------------------- quadrature

def adaptive_simpson(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, *,
                     rtol: float = QUAD_RTOL, atol: float = 0.0, panels: int = 64,
                     max_level: int = 40) -> float:
    """Adaptive Simpson integration of a vectorized integrand.

    All unresolved intervals at one refinement level are evaluated in a single
    batch. An interval is accepted once the two-half estimate moves the whole
    estimate by at most its share of ``max(rtol*|I|, atol)``.
    """
    if b <= a:
        raise DomainError("need a < b")
    width = b - a
    edges = np.linspace(a, b, panels + 1)
    lo, hi = edges[:-1], edges[1:]
    mid = 0.5 * (lo + hi)
    flo, fmid, fhi = f(lo), f(mid), f(hi)
    whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)
    estimate = math.fsum(whole)
    done = []
    for _ in range(max_level):
        h = hi - lo
        q1, q3 = lo + 0.25 * h, lo + 0.75 * h
        fq1, fq3 = f(q1), f(q3)
        left = h / 12.0 * (flo + 4.0 * fq1 + fmid)
        right = h / 12.0 * (fmid + 4.0 * fq3 + fhi)
        err = left + right - whole
        estimate = math.fsum(done) + math.fsum(left + right)
        tol = max(rtol * abs(estimate), atol) * (h / width)
        ok = np.abs(err) <= 15.0 * tol
        if ok.any():
            done.append(math.fsum(left[ok] + right[ok] + err[ok] / 15.0))
        if ok.all():
            return math.fsum(done)
        keep = ~ok
        lo_k, mid_k, hi_k = lo[keep], mid[keep], hi[keep]
        lo = np.concatenate([lo_k, mid_k])
        hi = np.concatenate([mid_k, hi_k])
        flo = np.concatenate([flo[keep], fmid[keep]])
        fhi = np.concatenate([fmid[keep], fhi[keep]])
        fmid = np.concatenate([fq1[keep], fq3[keep]])
        mid = np.concatenate([q1[keep], q3[keep]])
        whole = np.concatenate([left[keep], right[keep]])
    raise QuadratureError(f"adaptive Simpson did not reach rtol={rtol} within {max_level} levels")


# ---------------------------------------------------------------- moments accountant

def _mixture_tilt(x: np.ndarray, q: float, shift: float, sigma: float) -> np.ndarray:
    """log of [q N(shift, s^2) + (1-q) N(0, s^2)] / N(0, s^2) for shift = +-1.

    Working relative to the centred Gaussian keeps the x^2 terms out of every
    difference taken below.
    """
    a = (2.0 * shift * x - 1.0) / (2.0 * sigma**2)
    if q == 1.0:
        return a
    return np.logaddexp(math.log(q) + a, math.log1p(-q))


def _renyi_mixture(q: float, sigma: float, alpha: float, sign: float) -> float:
    """D_alpha(q P_s + (1-q) P_0 || q P_-s + (1-q) P_0) with s = sign."""
    half = max(1.0 + 8.0 * sigma * math.sqrt(alpha), 2.0 * alpha + 1.0 + 10.0 * sigma)
    panels = max(64, int(math.ceil(2 * half / (0.5 * sigma))))
    log_base = lambda x: -(x**2) / (2.0 * sigma**2) - _LOG_SQRT_2PI - math.log(sigma)

    def parts(x):
        tr = _mixture_tilt(x, q, -sign, sigma)
        return log_base(x) + tr, alpha * (_mixture_tilt(x, q, sign, sigma) - tr)

    def log_integrand(x):
        lr, t = parts(x)
        return lr + t

    grid = np.linspace(-half, half, 4 * panels + 1)
    peak = float(np.max(log_integrand(grid)))
    if peak < 50.0:
        # integrate r * ((p/r)^alpha - 1), i.e. I - 1, so small budgets keep their digits
        def g(x):
            lr, t = parts(x)
            return np.where(t > 1.0, np.exp(lr + t) - np.exp(lr), np.exp(lr) * np.expm1(np.minimum(t, 1.0)))

        excess = adaptive_simpson(g, -half, half, panels=panels, atol=1e-300)
        if excess <= -1.0:
            raise QuadratureError("Rényi integral evaluated to a nonpositive value")
        return max(math.log1p(excess), 0.0) / (alpha - 1.0)
    scaled = adaptive_simpson(lambda x: np.exp(log_integrand(x) - peak), -half, half, panels=panels)
    return max(peak + math.log(scaled), 0.0) / (alpha - 1.0)


@lru_cache(maxsize=65536)
def moments_accountant_eps(q: float, sigma: float, alpha: float) -> float:
    """Rényi budget of one subsampled Gaussian sum step at order ``alpha``.

    The neighbouring output laws are the mixtures ``q N(1, s^2) + (1-q) N(0, s^2)``
    and ``q N(-1, s^2) + (1-q) N(0, s^2)``; both divergence directions are
    integrated numerically and the larger is returned.
    """
    q, sigma, alpha = float(q), float(sigma), float(alpha)
    if not 0 <= q <= 1:
        raise DomainError(f"q must lie in [0, 1], got {q}")
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    if not alpha > 1:
        raise DomainError(f"alpha must exceed 1, got {alpha}")
    if q == 0:
        return 0.0
    return max(_renyi_mixture(q, sigma, alpha, 1.0), _renyi_mixture(q, sigma, alpha, -1.0))


def subsampled_gaussian_curve(q: float, sigma: float, steps: int = 1,
                              alphas: Iterable[float] = ALPHA_GRID) -> RenyiCurve:
    return RenyiCurve.from_function(lambda a: steps * moments_accountant_eps(q, sigma, a), alphas)


def sgd_privacy(T: int, q: float, sigma: float, delta: float | None = None, *,
                log_delta: float | None = None, alphas: Iterable[float] = ALPHA_GRID) -> PrivacyParams:
    """(epsilon, delta) for ``T`` composed subsampled Gaussian steps, best order reported."""
    if T < 0 or int(T) != T:
        raise DomainError(f"T must be a nonnegative integer, got {T}")
    curve = subsampled_gaussian_curve(q, sigma, int(T), alphas)
    return renyi_to_dp(curve, delta, log_delta=log_delta)


def sgd_epsilon(T: int, q: float, sigma: float, delta: float | None = None, *,
                log_delta: float | None = None, alphas: Iterable[float] = ALPHA_GRID) -> float:
    return sgd_privacy(T, q, sigma, delta, log_delta=log_delta, alphas=alphas).epsilon


def calibrate_sgd_sigma(eps: float, T: int, q: float, delta: float, *,
                        lo: float = 0.3, hi: float = 200.0, xtol: float = 1e-4) -> float:
    """Smallest noise multiplier (to ``xtol`` in log space) whose accounted epsilon is <= ``eps``."""
    if not eps > 0:
        raise DomainError(f"eps must be > 0, got {eps}")
    f = lambda log_s: sgd_epsilon(T, q, math.exp(log_s), delta) - eps
    if f(math.log(hi)) > 0:
        raise DomainError(f"no sigma <= {hi} reaches eps={eps}")
    if f(math.log(lo)) <= 0:
        return lo
    log_s = brentq(f, math.log(lo), math.log(hi), xtol=xtol)
    # brentq may stop on either side of the root
    sigma = math.exp(log_s)
    while sgd_epsilon(T, q, sigma, delta) > eps:
        sigma *= math.exp(xtol)
    return sigma
