"""Special functions, distributions and seeded sampling.

Every random draw in the package goes through an :class:`RngHandle`, which
maps a ``(seed, stream_id)`` pair (plus an optional tuple of child keys) onto
an independent numpy ``SeedSequence`` stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special


class DomainError(ValueError):
    """Raised when a function is called outside its mathematical domain."""


def _check_positive(name, x):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise DomainError(f"{name} must be finite and > 0, got {x!r}")
    return arr


def _check_prob(name, p, closed=True):
    arr = np.asarray(p, dtype=float)
    ok = (arr >= 0) & (arr <= 1) if closed else (arr > 0) & (arr < 1)
    if not np.all(ok):
        interval = "[0, 1]" if closed else "(0, 1)"
        raise DomainError(f"{name} must lie in {interval}, got {p!r}")
    return arr


@dataclass(frozen=True)
class GammaParams:
    """Gamma law in shape/rate form: density ~ x**(shape-1) * exp(-rate*x)."""

    shape: float
    rate: float

    def __post_init__(self):
        _check_positive("shape", self.shape)
        _check_positive("rate", self.rate)

    @classmethod
    def from_mean(cls, shape, mean):
        return cls(shape, shape / mean)

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def variance(self):
        return self.shape / self.rate**2


@dataclass(frozen=True)
class BetaParams:
    a: float
    b: float

    def __post_init__(self):
        _check_positive("a", self.a)
        _check_positive("b", self.b)

    @property
    def mean(self):
        return self.a / (self.a + self.b)

    @property
    def variance(self):
        s = self.a + self.b
        return self.a * self.b / (s * s * (s + 1.0))


@dataclass(frozen=True)
class NegBinParams:
    """Negative binomial with pmf Γ(α+k)/(k!Γ(α)) π^k (1-π)^α."""

    shape: float
    success_prob: float

    def __post_init__(self):
        _check_positive("shape", self.shape)
        _check_prob("success_prob", self.success_prob, closed=False)

    @classmethod
    def poisson_gamma(cls, shape, mean_rate, exposure):
        """Marginal count law of Poisson(λ·exposure) with λ ~ Ga(shape, shape/mean_rate)."""
        m = mean_rate * exposure
        return cls(shape, m / (shape + m))

    @property
    def mean(self):
        return self.shape * self.success_prob / (1.0 - self.success_prob)

    @property
    def variance(self):
        return self.mean / (1.0 - self.success_prob)


@dataclass
class RngHandle:
    """Reproducible random stream keyed by ``(seed, stream_id, *path)``.

    Two handles built from equal keys yield identical sequences. A handle is
    stateful once drawn from, so it must not be shared between concurrent
    tasks; use :meth:`child` to derive independent sub-streams instead.
    """

    seed: int
    stream_id: int = 0
    path: tuple = ()
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for v in (self.seed, self.stream_id, *self.path):
            if not (isinstance(v, (int, np.integer)) and 0 <= v < 2**64):
                raise DomainError(f"rng keys must be unsigned 64-bit integers, got {v!r}")

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), *map(int, self.path)))
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, *keys) -> "RngHandle":
        return RngHandle(self.seed, self.stream_id, self.path + tuple(int(k) for k in keys))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngHandle):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngHandle or numpy Generator, got {type(rng).__name__}")


# -- special functions ------------------------------------------------------

def log_gamma_fn(x):
    """ln Γ(x) for x > 0 (scalar or array)."""
    x = _check_positive("x", x)
    out = special.gammaln(x)
    return float(out) if out.ndim == 0 else out


def log_beta_fn(a, b):
    """ln B(a, b) = ln Γ(a) + ln Γ(b) - ln Γ(a+b)."""
    a = _check_positive("a", a)
    b = _check_positive("b", b)
    out = special.betaln(a, b)
    return float(out) if out.ndim == 0 else out


def negbin_log_pmf(k, p: NegBinParams):
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise DomainError(f"k must be a non-negative integer, got {k!r}")
    a, pi = p.shape, p.success_prob
    out = (special.gammaln(a + k) - special.gammaln(k + 1.0) - special.gammaln(a)
           + special.xlogy(k, pi) + a * np.log1p(-pi))
    return float(out) if np.ndim(out) == 0 else out


# -- samplers ---------------------------------------------------------------
# All samplers accept an optional ``size`` and return numpy scalars/arrays.

def sample_gamma(p: GammaParams, rng, size=None):
    # numpy uses Marsaglia-Tsang rejection, exact for shape < 1 as well
    return as_generator(rng).gamma(p.shape, 1.0 / p.rate, size)


def sample_beta(p: BetaParams, rng, size=None):
    return as_generator(rng).beta(p.a, p.b, size)


def sample_exponential(rate, rng, size=None):
    _check_positive("rate", rate)
    return as_generator(rng).exponential(1.0 / np.asarray(rate, dtype=float), size)


def sample_poisson(mean, rng, size=None):
    m = np.asarray(mean, dtype=float)
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise DomainError(f"mean must be finite and >= 0, got {mean!r}")
    return as_generator(rng).poisson(m, size)


def sample_bernoulli(prob, rng, size=None):
    p = _check_prob("prob", prob)
    shape = size if size is not None else p.shape
    return (as_generator(rng).random(shape) < p).astype(np.int64)
