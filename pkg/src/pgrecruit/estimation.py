"""Interim estimation of recruitment and dropout parameters.

Population parameters are estimated by maximum likelihood (closed forms for
pooled fractions/rates, two-dimensional simplex search elsewhere) and then
plugged into conjugate per-centre posteriors (empirical Bayes).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special

from .kernel import BetaParams, DomainError, GammaParams
from .trial import InterimSnapshot, Variant

CLAMP_LO, CLAMP_HI = 1e-6, 1e6


class InsufficientDataError(ValueError):
    pass


class OptimizerError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FitError(RuntimeError):
    """Wraps a failure in one parameter block of :func:`fit`."""

    def __init__(self, block, cause):
        super().__init__(f"{block}: {cause}")
        self.block = block
        self.cause = cause


class ClampWarning(UserWarning):
    pass


@dataclass(frozen=True)
class OptimizerSettings:
    max_evals: int = 2000
    rel_tol: float = 1e-8
    init: Optional[tuple] = None
    log_params: bool = True
    restarts: int = 3

    def __post_init__(self):
        if self.max_evals < 100:
            raise ValueError("max_evals must be >= 100")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")


def _positive_pair(a, b, names):
    if not (a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)):
        raise DomainError(f"{names} must be finite and > 0, got ({a}, {b})")


# -- log-likelihood blocks -------------------------------------------------------

def loglik_recruitment(alpha, mu, snap: InterimSnapshot) -> float:
    """Poisson-gamma marginal log-likelihood of the arrival counts, in (alpha, mu).

    Omits the parameter-free constant sum_i [n_i ln tau_i - ln n_i!].
    Centres not yet open contribute nothing.
    """
    _positive_pair(alpha, mu, "(alpha, mu)")
    m = snap.open
    n, tau = snap.n[m], snap.tau[m]
    return float(np.sum(special.gammaln(n + alpha)) - n.size * special.gammaln(alpha)
                 + n.sum() * (math.log(mu) - math.log(alpha))
                 - np.sum((n + alpha) * np.log1p(mu * tau / alpha)))


def _trials(snap: InterimSnapshot, use_tilde: bool):
    """Per-centre (successes, trials) for the r-block."""
    if use_tilde:
        return snap.k_tilde, snap.n
    # outcomes still pending in screening are excluded from the denominator
    return snap.k, snap.n - snap.nu


def loglik_beta_binomial(psi1, psi2, snap: InterimSnapshot, use_tilde: bool = False) -> float:
    _positive_pair(psi1, psi2, "(psi1, psi2)")
    m = snap.open
    succ, tot = _trials(snap, use_tilde)
    succ, tot = succ[m], tot[m]
    return float(np.sum(special.betaln(succ + psi1, tot - succ + psi2))
                 - succ.size * special.betaln(psi1, psi2))


def loglik_theta_prior(alpha2, beta2, snap: InterimSnapshot) -> float:
    """Gamma-mixed censored-exponential log-likelihood of (l_i, T_i)."""
    _positive_pair(alpha2, beta2, "(alpha2, beta2)")
    m = snap.open & (snap.t_screen > 0)
    l, T = snap.l[m], snap.t_screen[m]
    return float(np.sum(special.gammaln(l + alpha2) - special.gammaln(alpha2)
                        + alpha2 * math.log(beta2) - (l + alpha2) * np.log(beta2 + T)))


def loglik_r(r, snap: InterimSnapshot, use_tilde: bool = False) -> float:
    """Binomial log-likelihood of a shared randomization probability."""
    succ, tot = _trials(snap, use_tilde)
    m = snap.open
    s, f = succ[m].sum(), (tot[m] - succ[m]).sum()
    return float(special.xlogy(s, r) + special.xlog1py(f, -r))


def loglik_theta(theta, snap: InterimSnapshot) -> float:
    """Censored-exponential log-likelihood of a shared screening-dropout rate."""
    m = snap.open
    return float(special.xlogy(snap.l[m].sum(), theta) - theta * snap.t_screen[m].sum())


# -- closed-form estimators ---------------------------------------------------------

def estimate_r_pooled(snap: InterimSnapshot, use_tilde: bool = False) -> float:
    succ, tot = _trials(snap, use_tilde)
    m = snap.open
    denom = tot[m].sum()
    if denom <= 0:
        raise InsufficientDataError("no patients with known outcome; cannot estimate r")
    return float(succ[m].sum() / denom)


def estimate_theta_pooled(snap: InterimSnapshot) -> float:
    m = snap.open
    T = snap.t_screen[m].sum()
    if T <= 0:
        raise InsufficientDataError("total screening time is zero; cannot estimate theta")
    return float(snap.l[m].sum() / T)


# -- optimizer ---------------------------------------------------------------------

@dataclass
class OptimResult:
    x: tuple
    value: float
    n_evals: int
    converged: bool
    restarts_used: int = 0


def maximize_2d(loglik: Callable[[float, float], float], settings: OptimizerSettings = OptimizerSettings(),
                init=None) -> OptimResult:
    """Maximize a function of two positive parameters.

    Nelder-Mead on log-parameters (when ``settings.log_params``), restarted
    from the incumbent with a fresh simplex up to ``settings.restarts`` times.
    Parameters are confined to [1e-6, 1e6].
    """
    x0 = init if init is not None else settings.init
    if x0 is None:
        raise ValueError("an initial point is required")
    lo, hi = math.log(CLAMP_LO), math.log(CLAMP_HI)
    n_evals = 0

    if settings.log_params:
        to_nat = np.exp
        z0 = np.log(np.asarray(x0, dtype=float))
        zlo, zhi = lo, hi
    else:
        to_nat = np.asarray
        z0 = np.asarray(x0, dtype=float)
        zlo, zhi = CLAMP_LO, CLAMP_HI

    def neg(z):
        nonlocal n_evals
        n_evals += 1
        if np.any(z < zlo) or np.any(z > zhi):
            return np.inf
        a, b = to_nat(z)
        try:
            v = loglik(float(a), float(b))
        except (DomainError, FloatingPointError, ValueError):
            return np.inf
        return -v if np.isfinite(v) else np.inf

    z0 = np.clip(z0, zlo, zhi)
    step = np.full(2, 0.5) if settings.log_params else 0.5 * np.maximum(np.abs(z0), 1e-3)
    e1, e2 = np.array([step[0], 0.0]), np.array([0.0, step[1]])
    simplex = np.array([z0, z0 + e1, z0 + e2])
    vals = [neg(s) for s in simplex]
    if not np.any(np.isfinite(vals)):
        raise OptimizerError("log-likelihood is not finite anywhere on the initial simplex",
                             {"init": [float(v) for v in to_nat(z0)]})

    # NM tolerances are absolute; in log space xatol acts as a relative tolerance
    opts = dict(xatol=settings.rel_tol, fatol=settings.rel_tol)

    def run(simplex):
        budget = max(settings.max_evals - n_evals, 1)
        return optimize.minimize(neg, simplex[0], method="Nelder-Mead",
                                 options=dict(opts, maxfev=budget, initial_simplex=simplex))

    best = run(simplex)
    used = 0
    for attempt in range(settings.restarts):
        if n_evals >= settings.max_evals:
            break
        z = best.x
        sign = 1.0 if attempt % 2 == 0 else -1.0
        res = run(np.array([z, z + sign * e1, z - sign * e2]))
        used += 1
        if not res.fun < best.fun - settings.rel_tol * max(1.0, abs(best.fun)):
            if res.fun < best.fun:
                best = res
            break
        best = res
    if not np.isfinite(best.fun):
        raise OptimizerError("optimizer did not find a finite log-likelihood", {"n_evals": n_evals})
    a, b = to_nat(best.x)
    return OptimResult((float(a), float(b)), float(-best.fun), n_evals,
                       bool(n_evals < settings.max_evals), used)


# -- starting values --------------------------------------------------------------------

def init_recruitment(snap: InterimSnapshot):
    m = snap.open
    n, tau = snap.n[m], snap.tau[m]
    mu0 = max(n.sum() / tau.sum(), 1e-3) if tau.sum() > 0 else 1.0
    rates = n / tau
    if rates.size > 1:
        # subtract the Poisson component of the spread of observed rates
        excess = np.var(rates, ddof=1) - mu0 * np.mean(1.0 / tau)
        alpha0 = mu0**2 / excess if excess > 0 else 10.0
    else:
        alpha0 = 1.0
    return max(alpha0, 0.1), mu0


def init_beta(snap: InterimSnapshot, use_tilde: bool):
    succ, tot = _trials(snap, use_tilde)
    m = snap.open & (tot > 0)
    frac = succ[m] / tot[m]
    if frac.size < 2:
        return 1.0, 1.0
    mean = float(np.clip(frac.mean(), 0.01, 0.99))
    var = float(np.var(frac, ddof=1))
    s = mean * (1 - mean) / var - 1.0 if var > 0 else 10.0
    s = max(s, 0.2)
    return max(mean * s, 0.1), max((1 - mean) * s, 0.1)


def init_theta_prior(snap: InterimSnapshot):
    m = snap.open & (snap.t_screen > 0)
    rates = snap.l[m] / snap.t_screen[m]
    if m.sum() == 0:
        return 1.0, 1.0
    pooled = snap.l[m].sum() / snap.t_screen[m].sum()
    mean = max(pooled, 1e-3)
    var = float(np.var(rates, ddof=1)) if rates.size > 1 else 0.0
    alpha0 = max(mean**2 / var, 0.1) if var > 0 else 1.0
    return alpha0, alpha0 / mean


# -- fitted model ------------------------------------------------------------------------

def _clamp(name, x, warn):
    if x < CLAMP_LO or x > CLAMP_HI:
        if warn:
            warnings.warn(f"{name}={x:g} clamped to [{CLAMP_LO:g}, {CLAMP_HI:g}]", ClampWarning, stacklevel=3)
        return float(min(max(x, CLAMP_LO), CLAMP_HI))
    return float(x)


@dataclass(frozen=True)
class FittedModel:
    """Point estimates plus per-centre conjugate posteriors.

    Posterior hyperparameters are stored as arrays over centres:
    ``lambda_shape/lambda_rate`` always, ``r_a/r_b`` for A2/B3 and
    ``theta_shape/theta_rate`` for B2/B3.
    """

    variant: Variant
    t1: float
    screening_window: float
    alpha: float
    mu: float
    lambda_shape: np.ndarray
    lambda_rate: np.ndarray
    r_hat: Optional[float] = None
    theta_hat: Optional[float] = None
    psi: Optional[tuple] = None
    theta_prior: Optional[tuple] = None
    r_a: Optional[np.ndarray] = None
    r_b: Optional[np.ndarray] = None
    theta_shape: Optional[np.ndarray] = None
    theta_rate: Optional[np.ndarray] = None
    loglik: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    @property
    def beta(self) -> float:
        return self.alpha / self.mu

    @property
    def sigma2(self) -> float:
        return self.mu**2 / self.alpha

    @property
    def mean_r(self) -> float:
        if self.psi is not None:
            return self.psi[0] / (self.psi[0] + self.psi[1])
        return self.r_hat

    @property
    def mu2(self) -> Optional[float]:
        if self.theta_prior is None:
            return None
        return self.theta_prior[0] / self.theta_prior[1]

    def lambda_post(self):
        return [GammaParams(a, b) for a, b in zip(self.lambda_shape, self.lambda_rate)]

    def r_post(self):
        if self.r_a is None:
            return None
        return [BetaParams(a, b) for a, b in zip(self.r_a, self.r_b)]

    def theta_post(self):
        if self.theta_shape is None:
            return None
        return [GammaParams(a, b) for a, b in zip(self.theta_shape, self.theta_rate)]

    def estimates(self) -> dict:
        """Flat dictionary of the reported point estimates."""
        out = {"alpha": self.alpha, "mu": self.mu}
        if self.r_hat is not None:
            out["r"] = self.r_hat
        if self.theta_hat is not None:
            out["theta"] = self.theta_hat
        if self.psi is not None:
            out["psi1"], out["psi2"] = self.psi
            out["psi_ratio"] = self.mean_r
        if self.theta_prior is not None:
            out["alpha2"], out["beta2"] = self.theta_prior
            out["mu2"] = self.mu2
        return out

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else [float(v) for v in x]
        return {
            "variant": self.variant.value,
            "t1": self.t1,
            "screening_window": self.screening_window,
            "estimates": self.estimates(),
            "sigma2": self.sigma2,
            "posteriors": {
                "lambda_shape": arr(self.lambda_shape),
                "lambda_rate": arr(self.lambda_rate),
                "r_a": arr(self.r_a),
                "r_b": arr(self.r_b),
                "theta_shape": arr(self.theta_shape),
                "theta_rate": arr(self.theta_rate),
            },
            "loglik": self.loglik,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d) -> "FittedModel":
        e, p = d["estimates"], d["posteriors"]

        def arr(x):
            return None if x is None else np.asarray(x, dtype=float)
        return cls(
            variant=Variant.parse(d["variant"]),
            t1=float(d["t1"]),
            screening_window=float(d["screening_window"]),
            alpha=e["alpha"], mu=e["mu"],
            lambda_shape=arr(p["lambda_shape"]), lambda_rate=arr(p["lambda_rate"]),
            r_hat=e.get("r"), theta_hat=e.get("theta"),
            psi=(e["psi1"], e["psi2"]) if "psi1" in e else None,
            theta_prior=(e["alpha2"], e["beta2"]) if "alpha2" in e else None,
            r_a=arr(p["r_a"]), r_b=arr(p["r_b"]),
            theta_shape=arr(p["theta_shape"]), theta_rate=arr(p["theta_rate"]),
            loglik=d.get("loglik", float("nan")),
            diagnostics=d.get("diagnostics", {}),
        )


def build_fitted(snap: InterimSnapshot, variant, alpha, mu, r=None, theta=None, psi=None,
                 theta_prior=None, loglik=float("nan"), diagnostics=None, warn=True) -> FittedModel:
    """Assemble a :class:`FittedModel` from population estimates via conjugate updates."""
    variant = Variant.parse(variant)
    alpha = _clamp("alpha", alpha, warn)
    mu = _clamp("mu", mu, warn)
    beta = alpha / mu
    kw = {}
    if variant.random_r:
        p1, p2 = (_clamp("psi1", psi[0], warn), _clamp("psi2", psi[1], warn))
        succ, tot = _trials(snap, variant.screening)
        kw.update(psi=(p1, p2), r_a=p1 + succ, r_b=p2 + tot - succ)
    else:
        kw["r_hat"] = float(r)
    if variant.random_theta:
        a2, b2 = (_clamp("alpha2", theta_prior[0], warn), _clamp("beta2", theta_prior[1], warn))
        kw.update(theta_prior=(a2, b2), theta_shape=a2 + snap.l, theta_rate=b2 + snap.t_screen)
    elif variant is Variant.B1:
        kw["theta_hat"] = float(theta)
    return FittedModel(variant, snap.t1, snap.screening_window, alpha, mu,
                       alpha + snap.n.astype(float), beta + snap.tau,
                       loglik=loglik, diagnostics=diagnostics or {}, **kw)


def fit(snap: InterimSnapshot, variant, settings: OptimizerSettings = OptimizerSettings(),
        cache: Optional[dict] = None) -> FittedModel:
    """Estimate every parameter block required by ``variant`` and build posteriors.

    ``cache`` may be a dict shared between calls on the *same* snapshot and
    settings; blocks common to several models (e.g. the recruitment block)
    are then optimized once.
    """
    variant = Variant.parse(variant)
    cache = {} if cache is None else cache
    if not snap.open.any():
        raise FitError("recruitment", InsufficientDataError("no centre is open at t1"))
    diagnostics = {}
    total = 0.0

    def block(name, fn, key=None):
        if key is not None and key in cache:
            return cache[key]
        try:
            out = fn()
        except (InsufficientDataError, OptimizerError, DomainError) as exc:
            raise FitError(name, exc) from exc
        if key is not None:
            cache[key] = out
        return out

    if snap.n[snap.open].sum() == 0:
        raise FitError("recruitment", InsufficientDataError("no arrivals observed before t1"))
    res = block("recruitment", lambda: maximize_2d(
        lambda a, m: loglik_recruitment(a, m, snap), settings, init_recruitment(snap)), "recruitment")
    alpha, mu = res.x
    diagnostics["recruitment"] = {"n_evals": res.n_evals, "converged": res.converged}
    total += res.value

    kw = {}
    if variant.random_r:
        res = block("psi", lambda: maximize_2d(
            lambda a, b: loglik_beta_binomial(a, b, snap, variant.screening), settings,
            init_beta(snap, variant.screening)), ("psi", variant.screening))
        kw["psi"] = res.x
        diagnostics["psi"] = {"n_evals": res.n_evals, "converged": res.converged}
        total += res.value
    else:
        kw["r"] = block("r", lambda: estimate_r_pooled(snap, variant.screening))
        total += loglik_r(kw["r"], snap, variant.screening)

    if variant is Variant.B1:
        kw["theta"] = block("theta", lambda: estimate_theta_pooled(snap))
        total += loglik_theta(kw["theta"], snap)
    elif variant.random_theta:
        if not (snap.t_screen[snap.open] > 0).any():
            raise FitError("theta_prior", InsufficientDataError("no screening exposure observed"))
        res = block("theta_prior", lambda: maximize_2d(
            lambda a, b: loglik_theta_prior(a, b, snap), settings, init_theta_prior(snap)), "theta_prior")
        kw["theta_prior"] = res.x
        diagnostics["theta_prior"] = {"n_evals": res.n_evals, "converged": res.converged}
        total += res.value

    return build_fitted(snap, variant, alpha, mu, loglik=total, diagnostics=diagnostics, **kw)
