"""Log-densities and seeded sampling for the model's distribution families.

Covers Poisson, Negative Binomial, Uniform, Multivariate Normal, Gamma,
Inverse-Gamma and Half-Cauchy, plus the two auxiliary-variable
constructions the inference scheme relies on:

* the Poisson-Gamma mixture: ``x | a ~ Poisson(a)`` with
  ``a ~ Gamma(kappa, kappa/mu)`` yields ``x ~ NegativeBinomial(mu, kappa)``;
* the nested Inverse-Gamma pair: ``x | a ~ InverseGamma(1/2, 1/a)`` with
  ``a ~ InverseGamma(1/2, 1/A^2)`` yields ``sqrt(x) ~ HalfCauchy(A)``.

The Negative Binomial pmf is normalized by ``(kappa + mu)**(x + kappa)``,
the unique form consistent with the Poisson-Gamma mixture above (property
tests verify the equivalence).  All evaluation happens in the log domain
through ``gammaln``; no raw Gamma-function calls.

Every operation is pure given an explicit ``numpy.random.Generator``;
callers owning separate generators may use the module concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import singledispatch
from typing import Union

import numpy as np
from scipy.special import gammaln

from .errors import ParameterError, SupportError

__all__ = [
    "Poisson",
    "NegativeBinomial",
    "Uniform",
    "MultivariateNormal",
    "Gamma",
    "InverseGamma",
    "HalfCauchy",
    "DistSpec",
    "log_prob",
    "sample",
    "sample_negbin_poisson_gamma",
    "sample_halfcauchy_ig",
]

_LOG_2PI = math.log(2.0 * math.pi)


def _require_positive(name, value):
    if not (np.isfinite(value) and value > 0.0):
        raise ParameterError(f"{name} must be a positive finite real, got {value!r}")


@dataclass(frozen=True)
class Poisson:
    """Poisson(lam): pmf lam^x e^{-lam} / x! on x = 0, 1, ..."""

    lam: float

    def __post_init__(self):
        _require_positive("lam", self.lam)


@dataclass(frozen=True)
class NegativeBinomial:
    """NegativeBinomial(mu, kappa): mean mu, variance mu + mu^2/kappa."""

    mu: float
    kappa: float

    def __post_init__(self):
        _require_positive("mu", self.mu)
        _require_positive("kappa", self.kappa)


@dataclass(frozen=True)
class Uniform:
    """Uniform(a, b): constant density 1/(b-a) on a < x < b."""

    a: float
    b: float

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b) and self.a < self.b):
            raise ParameterError(f"Uniform requires a < b, got a={self.a}, b={self.b}")


@dataclass(frozen=True, eq=False)
class MultivariateNormal:
    """N(mean, cov) with cov symmetric positive definite."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ParameterError(f"cov must be {d}x{d}, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-12):
            raise ParameterError("cov must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ParameterError("cov must be positive definite") from exc
        object.__setattr__(self, "_chol", chol)


@dataclass(frozen=True)
class Gamma:
    """Gamma(A, B) with shape A and *rate* B: density B^A x^{A-1} e^{-Bx}/Gamma(A)."""

    shape: float
    rate: float

    def __post_init__(self):
        _require_positive("shape", self.shape)
        _require_positive("rate", self.rate)


@dataclass(frozen=True)
class InverseGamma:
    """InverseGamma(A, B): density B^A x^{-A-1} e^{-B/x}/Gamma(A) on x > 0."""

    shape: float
    rate: float

    def __post_init__(self):
        _require_positive("shape", self.shape)
        _require_positive("rate", self.rate)


@dataclass(frozen=True)
class HalfCauchy:
    """HalfCauchy(sigma): density 2 sigma / (pi (x^2 + sigma^2)) on x > 0."""

    scale: float

    def __post_init__(self):
        _require_positive("scale", self.scale)


DistSpec = Union[
    Poisson,
    NegativeBinomial,
    Uniform,
    MultivariateNormal,
    Gamma,
    InverseGamma,
    HalfCauchy,
]


def _check_count(x):
    xv = float(x)
    if not (np.isfinite(xv) and xv >= 0 and float(xv).is_integer()):
        raise SupportError(f"count support requires a nonnegative integer, got {x!r}")
    return xv


def _check_positive_x(x):
    xv = float(x)
    if not (np.isfinite(xv) and xv > 0):
        raise SupportError(f"support is x > 0, got {x!r}")
    return xv


@singledispatch
def log_prob(spec: DistSpec, x) -> float:
    """Log density (or log pmf) of ``spec`` at ``x``.

    Raises ``SupportError`` when ``x`` is outside the support.
    """
    raise TypeError(f"unsupported distribution spec: {spec!r}")


@log_prob.register
def _(spec: Poisson, x) -> float:
    xv = _check_count(x)
    return xv * math.log(spec.lam) - spec.lam - float(gammaln(xv + 1.0))


@log_prob.register
def _(spec: NegativeBinomial, x) -> float:
    xv = _check_count(x)
    mu, kappa = spec.mu, spec.kappa
    log_denom = math.log(kappa + mu)
    return float(
        gammaln(xv + kappa)
        - gammaln(kappa)
        - gammaln(xv + 1.0)
        + kappa * (math.log(kappa) - log_denom)
        + xv * (math.log(mu) - log_denom)
    )


@log_prob.register
def _(spec: Uniform, x) -> float:
    xv = float(x)
    if not (spec.a < xv < spec.b):
        raise SupportError(f"Uniform support is ({spec.a}, {spec.b}), got {x!r}")
    return -math.log(spec.b - spec.a)


@log_prob.register
def _(spec: MultivariateNormal, x) -> float:
    xv = np.atleast_1d(np.asarray(x, dtype=float))
    d = spec.mean.shape[0]
    if xv.shape != (d,):
        raise SupportError(f"expected a length-{d} vector, got shape {xv.shape}")
    chol = spec._chol
    z = np.linalg.solve(chol, xv - spec.mean)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (d * _LOG_2PI + log_det + float(z @ z))


@log_prob.register
def _(spec: Gamma, x) -> float:
    xv = _check_positive_x(x)
    a, b = spec.shape, spec.rate
    return a * math.log(b) + (a - 1.0) * math.log(xv) - b * xv - float(gammaln(a))


@log_prob.register
def _(spec: InverseGamma, x) -> float:
    xv = _check_positive_x(x)
    a, b = spec.shape, spec.rate
    return a * math.log(b) - (a + 1.0) * math.log(xv) - b / xv - float(gammaln(a))


@log_prob.register
def _(spec: HalfCauchy, x) -> float:
    xv = _check_positive_x(x)
    s = spec.scale
    return math.log(2.0 * s / math.pi) - math.log(xv * xv + s * s)


@singledispatch
def sample(spec: DistSpec, rng: np.random.Generator, size=None):
    """Draw from ``spec`` using ``rng``; deterministic for a fixed seed.

    ``size=None`` returns a scalar (a vector for the multivariate normal).
    """
    raise TypeError(f"unsupported distribution spec: {spec!r}")


@sample.register
def _(spec: Poisson, rng, size=None):
    return rng.poisson(spec.lam, size=size)


@sample.register
def _(spec: NegativeBinomial, rng, size=None):
    # number-of-failures parametrization with p = kappa/(kappa+mu) matches the pmf
    p = spec.kappa / (spec.kappa + spec.mu)
    return rng.negative_binomial(spec.kappa, p, size=size)


@sample.register
def _(spec: Uniform, rng, size=None):
    return rng.uniform(spec.a, spec.b, size=size)


@sample.register
def _(spec: MultivariateNormal, rng, size=None):
    d = spec.mean.shape[0]
    shape = (d,) if size is None else (size, d)
    z = rng.standard_normal(shape)
    return spec.mean + z @ spec._chol.T


@sample.register
def _(spec: Gamma, rng, size=None):
    return rng.gamma(spec.shape, 1.0 / spec.rate, size=size)


@sample.register
def _(spec: InverseGamma, rng, size=None):
    return spec.rate / rng.gamma(spec.shape, 1.0, size=size)


@sample.register
def _(spec: HalfCauchy, rng, size=None):
    # inverse CDF: F(x) = (2/pi) arctan(x/sigma); kept independent of the
    # nested Inverse-Gamma construction so the two routes can cross-check
    u = rng.uniform(0.0, 1.0, size=size)
    return spec.scale * np.tan(0.5 * math.pi * u)


def sample_negbin_poisson_gamma(mu, kappa, rng, size=None):
    """Negative Binomial draw via the Poisson-Gamma mixture.

    Draws ``a ~ Gamma(kappa, kappa/mu)`` then ``x | a ~ Poisson(a)``, so that
    ``x ~ NegativeBinomial(mu, kappa)``.
    """
    _require_positive("mu", mu)
    _require_positive("kappa", kappa)
    a = rng.gamma(kappa, mu / kappa, size=size)
    return rng.poisson(a)


def sample_halfcauchy_ig(A, rng, size=None):
    """Half-Cauchy draw via the nested Inverse-Gamma construction.

    Draws ``a ~ InverseGamma(1/2, 1/A^2)``, then ``x | a ~ InverseGamma(1/2, 1/a)``
    and returns ``sqrt(x) ~ HalfCauchy(A)``.
    """
    _require_positive("A", A)
    a = (1.0 / A**2) / rng.gamma(0.5, 1.0, size=size)
    x = (1.0 / a) / rng.gamma(0.5, 1.0, size=size)
    return np.sqrt(x)
