"""Unpunctuality and service-time distributions.

Every unpunctuality model exposes ``cdf(t, a)`` and ``quantile(p, a)``, where
``a`` is the scheduled appointment time.  Sampling goes through the quantile
function with a uniform draw, so a single uniform per patient can be reused
across schedules (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special


# ---------------------------------------------------------------------------
# Family kernels (vectorized, parameters may be arrays broadcast against t)
# ---------------------------------------------------------------------------

def _uniform_cdf(t, lo, hi):
    return np.clip((t - lo) / (hi - lo), 0.0, 1.0)


def _uniform_quantile(p, lo, hi):
    return lo + p * (hi - lo)


def _normal_cdf(t, mean, sd):
    return special.ndtr((t - mean) / sd)


def _normal_quantile(p, mean, sd):
    return mean + sd * special.ndtri(p)


def _laplace_cdf(t, mu, pi, lam_l, lam_r):
    t, mu, pi, lam_l, lam_r = np.broadcast_arrays(
        np.asarray(t, dtype=float), mu, pi, lam_l, lam_r)
    d = t - mu
    left = d <= 0
    out = np.empty(d.shape)
    # exp of a nonpositive argument on each branch, so no overflow
    out[left] = pi[left] * np.exp(lam_l[left] * d[left])
    right = ~left
    out[right] = pi[right] + (1.0 - pi[right]) * -np.expm1(-lam_r[right] * d[right])
    return out


def _laplace_quantile(p, mu, pi, lam_l, lam_r):
    p, mu, pi, lam_l, lam_r = np.broadcast_arrays(
        np.asarray(p, dtype=float), mu, pi, lam_l, lam_r)
    out = np.empty(p.shape)
    left = p <= pi
    with np.errstate(divide="ignore"):
        out[left] = mu[left] + np.log(p[left] / pi[left]) / lam_l[left]
        right = ~left
        out[right] = mu[right] - np.log((1.0 - p[right]) / (1.0 - pi[right])) / lam_r[right]
    return out


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("cdf is only defined for finite t")
    return t


# ---------------------------------------------------------------------------
# Unpunctuality models
# ---------------------------------------------------------------------------

class UnpunctualityModel:
    """Base class: the distribution of arrival minus scheduled time."""

    time_dependent = False
    continuous = True

    def cdf(self, t, a=0.0):
        raise NotImplementedError

    def quantile(self, p, a=0.0):
        raise NotImplementedError

    def sample(self, a, rng: np.random.Generator) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return self.quantile(rng.random(a.shape), a)


@dataclass(frozen=True)
class PointMassAtZero(UnpunctualityModel):
    """Punctual patients."""

    continuous = False

    def cdf(self, t, a=0.0):
        t = _check_t(t)
        return np.broadcast_to((t >= 0).astype(float), np.broadcast(t, a).shape).copy()

    def quantile(self, p, a=0.0):
        return np.zeros(np.broadcast(np.asarray(p), np.asarray(a)).shape)


@dataclass(frozen=True)
class Uniform(UnpunctualityModel):
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"Uniform needs lo < hi, got ({self.lo}, {self.hi})")

    def cdf(self, t, a=0.0):
        t = _check_t(t)
        return np.broadcast_to(_uniform_cdf(t, self.lo, self.hi),
                               np.broadcast(t, a).shape).copy()

    def quantile(self, p, a=0.0):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(_uniform_quantile(p, self.lo, self.hi),
                               np.broadcast(p, a).shape).copy()

    @property
    def mean(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def variance(self):
        return (self.hi - self.lo) ** 2 / 12.0


@dataclass(frozen=True)
class Normal(UnpunctualityModel):
    """Normal unpunctuality parameterized by mean and standard deviation."""

    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError("Normal needs sd > 0")

    def cdf(self, t, a=0.0):
        t = _check_t(t)
        return np.broadcast_to(_normal_cdf(t, self.mean, self.sd),
                               np.broadcast(t, a).shape).copy()

    def quantile(self, p, a=0.0):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(_normal_quantile(p, self.mean, self.sd),
                               np.broadcast(p, a).shape).copy()

    @property
    def variance(self):
        return self.sd ** 2


@dataclass(frozen=True)
class GeneralizedLaplace(UnpunctualityModel):
    """Two-sided exponential mixture with mass ``pi`` to the left of ``mu``.

    Density ``pi*lam_l*exp(lam_l*(x-mu))`` for ``x <= mu`` and
    ``(1-pi)*lam_r*exp(-lam_r*(x-mu))`` above it.
    """

    mu: float
    pi: float
    lambda_l: float
    lambda_r: float

    def __post_init__(self):
        if not 0 < self.pi < 1:
            raise ValueError("GeneralizedLaplace needs 0 < pi < 1")
        if not (self.lambda_l > 0 and self.lambda_r > 0):
            raise ValueError("GeneralizedLaplace needs positive rates")

    def _params(self):
        return (np.float64(self.mu), np.float64(self.pi),
                np.float64(self.lambda_l), np.float64(self.lambda_r))

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.mu
        return np.where(d <= 0,
                        self.pi * self.lambda_l * np.exp(self.lambda_l * np.minimum(d, 0)),
                        (1 - self.pi) * self.lambda_r * np.exp(-self.lambda_r * np.maximum(d, 0)))

    def cdf(self, t, a=0.0):
        t = _check_t(t)
        return np.broadcast_to(_laplace_cdf(t, *self._params()),
                               np.broadcast(t, a).shape).copy()

    def quantile(self, p, a=0.0):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(_laplace_quantile(p, *self._params()),
                               np.broadcast(p, a).shape).copy()

    @property
    def mean(self):
        return self.mu - self.pi / self.lambda_l + (1 - self.pi) / self.lambda_r

    @property
    def variance(self):
        second = 2 * self.pi / self.lambda_l ** 2 + 2 * (1 - self.pi) / self.lambda_r ** 2
        return second - (self.mean - self.mu) ** 2


@dataclass(frozen=True, eq=False)
class Empirical(UnpunctualityModel):
    """Step CDF of observed unpunctualities.

    By default the sample is pooled over the day.  Passing ``bucket_edges``
    (interior breakpoints in scheduled time) together with ``scheduled``
    (one scheduled time per value) switches to a piecewise-in-time model
    where each bucket has its own step CDF.
    """

    values: np.ndarray
    scheduled: np.ndarray | None = None
    bucket_edges: tuple[float, ...] | None = None
    _buckets: tuple[np.ndarray, ...] = field(init=False, repr=False)

    continuous = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("Empirical needs a nonempty 1-d sample")
        if not np.all(np.isfinite(values)):
            raise ValueError("Empirical sample contains non-finite values")
        object.__setattr__(self, "values", np.sort(values) if self.bucket_edges is None else values)
        if self.bucket_edges is None:
            object.__setattr__(self, "_buckets", (self.values,))
            return
        if self.scheduled is None:
            raise ValueError("bucketed Empirical needs the scheduled time of each value")
        sched = np.asarray(self.scheduled, dtype=float)
        if sched.shape != values.shape:
            raise ValueError("scheduled and values differ in length")
        edges = tuple(float(e) for e in self.bucket_edges)
        if list(edges) != sorted(edges):
            raise ValueError("bucket_edges must be increasing")
        idx = np.searchsorted(edges, sched, side="right")
        buckets = []
        for b in range(len(edges) + 1):
            chunk = np.sort(values[idx == b])
            if chunk.size == 0:
                raise ValueError(f"time bucket {b} has no observations")
            buckets.append(chunk)
        object.__setattr__(self, "bucket_edges", edges)
        object.__setattr__(self, "scheduled", sched)
        object.__setattr__(self, "_buckets", tuple(buckets))

    @property
    def time_dependent(self):
        return self.bucket_edges is not None

    @classmethod
    def from_file(cls, path) -> "Empirical":
        """Read a one-column text file of unpunctuality values."""
        values = np.loadtxt(path, dtype=float, ndmin=1, comments="#")
        return cls(values)

    def _bucket_index(self, a):
        if self.bucket_edges is None:
            return np.zeros(np.shape(a), dtype=int)
        return np.searchsorted(self.bucket_edges, a, side="right")

    def cdf(self, t, a=0.0):
        t = _check_t(t)
        t, a = np.broadcast_arrays(t, np.asarray(a, dtype=float))
        out = np.empty(t.shape)
        idx = self._bucket_index(a)
        for b, vals in enumerate(self._buckets):
            sel = idx == b
            out[sel] = np.searchsorted(vals, t[sel], side="right") / vals.size
        return out

    def quantile(self, p, a=0.0):
        # generalized inverse: smallest sample value v with ECDF(v) >= p
        p, a = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(a, dtype=float))
        out = np.empty(p.shape)
        idx = self._bucket_index(a)
        for b, vals in enumerate(self._buckets):
            sel = idx == b
            k = np.ceil(p[sel] * vals.size).astype(int) - 1
            out[sel] = vals[np.clip(k, 0, vals.size - 1)]
        return out


@dataclass(frozen=True)
class MiddaySplit(UnpunctualityModel):
    """One model for appointments at or before ``split``, another after."""

    early: UnpunctualityModel
    late: UnpunctualityModel
    split: float = 0.5

    time_dependent = True

    @property
    def continuous(self):
        return self.early.continuous and self.late.continuous

    def cdf(self, t, a=0.0):
        t = _check_t(t)
        t, a = np.broadcast_arrays(t, np.asarray(a, dtype=float))
        return np.where(a <= self.split, self.early.cdf(t, a), self.late.cdf(t, a))

    def quantile(self, p, a=0.0):
        p, a = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(a, dtype=float))
        return np.where(a <= self.split, self.early.quantile(p, a), self.late.quantile(p, a))


_DRIFT_FAMILIES = {
    "normal": (("mean", "sd"), _normal_cdf, _normal_quantile),
    "uniform": (("lo", "hi"), _uniform_cdf, _uniform_quantile),
    "laplace": (("mu", "pi", "lambda_l", "lambda_r"), _laplace_cdf, _laplace_quantile),
}


@dataclass(frozen=True, eq=False)
class ParametricDrift(UnpunctualityModel):
    """A parametric family whose parameters are polynomials in scheduled time.

    ``coefficients`` maps each parameter name of ``family`` to polynomial
    coefficients in ascending powers of ``a``; e.g. ``{"mean": (0, -0.1),
    "sd": (0.2, -0.15)}``.  Scheduled times outside ``[0, horizon]`` are
    clamped to the nearest endpoint.
    """

    family: str
    coefficients: Mapping[str, Sequence[float]]
    horizon: float = 1.0

    time_dependent = True

    def __post_init__(self):
        if self.family not in _DRIFT_FAMILIES:
            raise ValueError(f"unknown drift family {self.family!r}")
        names = _DRIFT_FAMILIES[self.family][0]
        if set(self.coefficients) != set(names):
            raise ValueError(f"{self.family} drift needs coefficients for {names}")
        coeffs = {k: tuple(float(c) for c in v) for k, v in self.coefficients.items()}
        object.__setattr__(self, "coefficients", coeffs)
        grid = np.linspace(0.0, self.horizon, 1001)
        p = self.params(grid)
        if self.family == "normal" and np.any(p[1] <= 0):
            raise ValueError("normal drift has nonpositive sd on [0, T]")
        if self.family == "uniform" and np.any(p[0] >= p[1]):
            raise ValueError("uniform drift has lo >= hi on [0, T]")
        if self.family == "laplace" and (np.any(p[1] <= 0) or np.any(p[1] >= 1)
                                         or np.any(p[2] <= 0) or np.any(p[3] <= 0)):
            raise ValueError("laplace drift leaves the valid parameter region on [0, T]")

    def params(self, a):
        a = np.clip(np.asarray(a, dtype=float), 0.0, self.horizon)
        names = _DRIFT_FAMILIES[self.family][0]
        # np.polynomial.polynomial.polyval takes ascending coefficients
        return tuple(np.polynomial.polynomial.polyval(a, self.coefficients[n]) for n in names)

    def at(self, a: float) -> UnpunctualityModel:
        """Frozen model for a single scheduled time."""
        vals = [float(v) for v in self.params(a)]
        family = {"normal": Normal, "uniform": Uniform, "laplace": GeneralizedLaplace}[self.family]
        return family(*vals)

    def cdf(self, t, a=0.0):
        t = _check_t(t)
        t, a = np.broadcast_arrays(t, np.asarray(a, dtype=float))
        return _DRIFT_FAMILIES[self.family][1](t, *self.params(a))

    def quantile(self, p, a=0.0):
        p, a = np.broadcast_arrays(np.asarray(p, dtype=float), np.asarray(a, dtype=float))
        return _DRIFT_FAMILIES[self.family][2](p, *self.params(a))


# ---------------------------------------------------------------------------
# Service times
# ---------------------------------------------------------------------------

class ServiceModel:
    """Base class for i.i.d. service durations."""

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError


@dataclass(frozen=True)
class Deterministic(ServiceModel):
    d: float

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError("service duration must be positive")

    @property
    def mean(self):
        return self.d

    @property
    def sd(self):
        return 0.0

    def sample(self, rng, size=None):
        if size is None:
            return self.d
        return np.full(size, self.d)


@dataclass(frozen=True)
class Exponential(ServiceModel):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("exponential rate must be positive")

    @property
    def mean(self):
        return 1.0 / self.rate

    @property
    def sd(self):
        return 1.0 / self.rate

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)


@dataclass(frozen=True)
class LogNormal(ServiceModel):
    log_mean: float
    log_sd: float

    def __post_init__(self):
        if not self.log_sd > 0:
            raise ValueError("log_sd must be positive")

    @classmethod
    def with_mean(cls, mean: float, log_sd: float) -> "LogNormal":
        return cls(math.log(mean) - log_sd ** 2 / 2, log_sd)

    @property
    def mean(self):
        return math.exp(self.log_mean + self.log_sd ** 2 / 2)

    @property
    def sd(self):
        return self.mean * math.sqrt(math.expm1(self.log_sd ** 2))

    def sample(self, rng, size=None):
        return rng.lognormal(self.log_mean, self.log_sd, size)


def service_for_rate(kind: str, rate: float, log_sd: float = 2.0) -> ServiceModel:
    """Service model with mean ``1/rate`` (deterministic, exponential or lognormal)."""
    if kind == "deterministic":
        return Deterministic(1.0 / rate)
    if kind == "exponential":
        return Exponential(rate)
    if kind == "lognormal":
        return LogNormal(-math.log(rate) - log_sd ** 2 / 2, log_sd)
    raise ValueError(f"unknown service kind {kind!r}")
