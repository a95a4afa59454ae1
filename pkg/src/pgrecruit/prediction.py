"""Forecasting the randomized-patient count and the recruitment time.

Given interim data and a fitted model, the future randomized count in centre
``i`` is

    k_i + (pending patients that survive screening) + Poisson(p_i * lam_i * (t - t1 - R))

with ``lam_i``, ``r_i``, ``theta_i`` drawn from their posteriors and
``p_i = r_i * exp(-theta_i * R)``. Pending patients arrived in ``(t1 - R, t1]``
and are randomized at ``arrival + R`` with probability
``exp(-theta_i * (arrival + R - t1))`` (probability ``r_i`` at a uniform time in
``[t1, t1 + R]`` for the instant-dropout models).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, optimize, stats

from .estimation import FittedModel
from .kernel import DomainError, as_generator
from .trial import InterimSnapshot, Variant


class HorizonError(ValueError):
    pass


@dataclass(frozen=True)
class LaplacePosterior:
    """Gamma posterior of a centre's screening-dropout rate."""

    alpha_post: float
    rate_post: float

    def __post_init__(self):
        if not (self.alpha_post > 0 and self.rate_post > 0):
            raise DomainError("posterior shape and rate must be > 0")


def laplace_f(lp: LaplacePosterior, s):
    """E[exp(-theta * s)] for theta ~ Ga(alpha_post, rate_post)."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise DomainError(f"s must be >= 0, got {s}")
    out = np.exp(-lp.alpha_post * np.log1p(s / lp.rate_post))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class PredictiveMoments:
    t: float
    mean: float
    variance: float
    base: int = 0          # randomized count already observed at t1


class _Posterior:
    """Per-centre posterior moments and pending-patient terms of a fitted model."""

    def __init__(self, fm: FittedModel, snap: InterimSnapshot):
        if abs(fm.screening_window - snap.screening_window) > 1e-9:
            raise DomainError("fitted model and snapshot disagree on the screening window")
        self.fm = fm
        self.t1 = snap.t1
        self.R = snap.screening_window
        self.K = int(snap.k.sum())
        self.nu = snap.nu.astype(float)
        a, b = fm.lambda_shape, fm.lambda_rate
        self.El = a / b
        self.El2 = a * (a + 1.0) / b**2
        if fm.r_a is not None:
            s = fm.r_a + fm.r_b
            self.Er = fm.r_a / s
            self.Er2 = fm.r_a * (fm.r_a + 1.0) / (s * (s + 1.0))
        else:
            self.Er = np.full(len(a), fm.r_hat)
            self.Er2 = self.Er**2
        self.screening = fm.variant.screening
        self.FR = self.F(slice(None), self.R)
        self.F2R = self.F(slice(None), 2 * self.R)
        delta = snap.pending_arrival + self.R - self.t1
        order = np.argsort(delta, kind="stable")
        self.pc = snap.pending_centre[order]
        self.delta = delta[order]
        self._bridge_cache = {}
        self._poisson = None

    def F(self, idx, s):
        """Posterior Laplace transform of theta for centres ``idx`` at ``s``."""
        fm = self.fm
        if fm.theta_shape is not None:
            return np.exp(-fm.theta_shape[idx] * np.log1p(s / fm.theta_rate[idx]))
        if fm.theta_hat is not None:
            return np.exp(-fm.theta_hat * s) * np.ones_like(self.El[idx])
        return np.ones_like(self.El[idx])

    def bridge(self, t):
        """(mean, variance, covariance-per-unit-dt) of the pending contribution by time t."""
        if self.R == 0:
            return 0.0, 0.0, 0.0
        if not self.screening:
            q = min(max((t - self.t1) / self.R, 0.0), 1.0)
            nu, Er, Er2 = self.nu, self.Er, self.Er2
            mean = np.sum(nu * q * Er)
            var = np.sum(nu * q * Er - nu * q * q * Er2 + nu**2 * q * q * (Er2 - Er**2))
            cov = np.sum(nu * q * self.El * (Er2 - Er**2))
            return float(mean), float(var), float(cov)
        n_in = int(np.searchsorted(self.delta, t - self.t1 + 1e-12, side="right"))
        if n_in not in self._bridge_cache:
            self._bridge_cache[n_in] = self._screening_bridge(n_in)
        return self._bridge_cache[n_in]

    def _screening_bridge(self, n_in):
        pc, d = self.pc[:n_in], self.delta[:n_in]
        if pc.size == 0:
            return 0.0, 0.0, 0.0
        Fd = self.F(pc, d)
        mean = Fd.sum()
        var = np.sum(Fd - self.F(pc, 2 * d))
        # covariance of the success indicators through the shared theta_i, diagonal included
        for c in np.unique(pc):
            dc = d[pc == c]
            fd = Fd[pc == c]
            pair = self.F(np.full((dc.size, dc.size), c), dc[:, None] + dc[None, :])
            var += float(np.sum(pair - fd[:, None] * fd[None, :]))
        cov = np.sum(self.Er[pc] * self.El[pc] * (self.F(pc, d + self.R) - Fd * self.FR[pc]))
        return float(mean), float(var), float(cov)

    def poisson_terms(self):
        """Coefficients (mean slope, variance slope, variance curvature) in dt = t - t1 - R."""
        if self._poisson is not None:
            return self._poisson
        Ep = self.Er * self.FR
        Ep2 = self.Er2 * self.F2R
        slope = np.sum(Ep * self.El)
        quad = np.sum(Ep2 * self.El2 - (Ep * self.El) ** 2)
        self._poisson = (float(slope), float(slope), float(quad))
        return self._poisson

    def moments(self, t, cross_covariance=True):
        bm, bv, bc = self.bridge(t)
        dt = max(t - self.t1 - self.R, 0.0)
        slope, vlin, vquad = self.poisson_terms()
        mean = self.K + bm + slope * dt
        var = bv + vlin * dt + vquad * dt * dt
        if cross_covariance:
            var += 2.0 * bc * dt
        return mean, max(var, 0.0)

    def curve(self, ts, cross_covariance=True):
        """Vectorized :meth:`moments` over an array of times."""
        ts = np.asarray(ts, dtype=float)
        mean = np.empty(ts.shape)
        var = np.empty(ts.shape)
        t_b = self.t1 + self.R
        inside = ts < t_b
        for i in np.flatnonzero(inside):
            mean[i], var[i] = self.moments(ts[i], cross_covariance)
        out = ~inside
        if out.any():
            bm, bv, bc = self.bridge(t_b)
            slope, vlin, vquad = self.poisson_terms()
            dt = ts[out] - t_b
            mean[out] = self.K + bm + slope * dt
            v = bv + vlin * dt + vquad * dt * dt
            if cross_covariance:
                v = v + 2.0 * bc * dt
            var[out] = np.maximum(v, 0.0)
        return mean, var


def predictive_moments(fm: FittedModel, snap: InterimSnapshot, t: float,
                       cross_covariance: bool = True) -> PredictiveMoments:
    """Conditional mean and variance of the total randomized count at ``t > t1 + R``.

    With ``cross_covariance`` (default) the covariance between the pending
    patients and the later Poisson stream, induced by shared random
    ``r_i``/``theta_i``, is included so the result is the exact law-of-total-
    variance value; without it the two parts are added as if independent.
    """
    if not t > snap.t1 + snap.screening_window:
        raise DomainError(f"t must exceed t1 + R = {snap.t1 + snap.screening_window}; "
                          "simulate paths for the bridge interval")
    mean, var = _Posterior(fm, snap).moments(t, cross_covariance)
    return PredictiveMoments(float(t), mean, var, int(snap.k.sum()))


def moment_curve(fm: FittedModel, snap: InterimSnapshot, grid, cross_covariance=True):
    """Mean and variance on an arbitrary time grid (bridge interval included)."""
    return _Posterior(fm, snap).curve(grid, cross_covariance)


def predictive_bounds(m: PredictiveMoments, delta: float = 0.05, rounded: bool = True):
    """Normal-approximation (1 - delta) bounds for the randomized count."""
    if not 0 < delta < 1:
        raise DomainError("delta must lie in (0, 1)")
    z = stats.norm.ppf(1 - delta / 2)
    sd = math.sqrt(m.variance)
    lo, hi = max(m.mean - z * sd, m.base), max(m.mean + z * sd, m.base)
    if rounded:
        lo, hi = math.floor(lo + 1e-9), math.ceil(hi - 1e-9)
    return lo, hi


# -- path simulation -----------------------------------------------------------

@dataclass
class PathEnsemble:
    """Predictive paths of the total randomized count after ``t1``.

    Each path holds its pending-patient randomization times (``inf`` when the
    patient drops out) and the total post-bridge Poisson rate
    ``sum_i p_i lam_i``. Queries draw the post-bridge Poisson noise afresh, so
    every query has the exact predictive law but distinct queries are not
    coupled path-by-path.
    """

    t1: float
    start: float               # t1 + R, when new arrivals begin to be randomized
    base: int
    rate: np.ndarray           # (n_paths,)
    bridge_times: np.ndarray   # (n_paths, n_pending), sorted per row
    gen: np.random.Generator = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.rate.size

    def counts_at(self, t) -> np.ndarray:
        dt = max(t - self.start, 0.0)
        bridge = (self.bridge_times <= t).sum(axis=1)
        return self.base + bridge + self.gen.poisson(self.rate * dt)

    def first_passage(self, target) -> np.ndarray:
        """Time at which each path's randomized count first reaches ``target``."""
        need = int(target) - self.base
        if need <= 0:
            return np.full(self.n_paths, self.t1)
        nb = np.isfinite(self.bridge_times).sum(axis=1)
        out = np.empty(self.n_paths)
        in_bridge = nb >= need
        if in_bridge.any():
            out[in_bridge] = self.bridge_times[in_bridge, need - 1]
        rest = ~in_bridge
        m = need - nb[rest]
        with np.errstate(divide="ignore"):
            out[rest] = self.start + self.gen.gamma(m.astype(float)) / self.rate[rest]
        return out

    def event_times(self, path: int, until: float) -> np.ndarray:
        """Explicit randomization times of one path on ``(t1, until]``."""
        bt = self.bridge_times[path]
        bt = bt[bt <= until]
        lam = self.rate[path]
        if lam <= 0 or until <= self.start:
            return bt
        n = self.gen.poisson(lam * (until - self.start))
        post = np.sort(self.start + self.gen.random(n) * (until - self.start))
        return np.concatenate([bt, post])


def simulate_predictive_paths(fm: FittedModel, snap: InterimSnapshot, n_paths: int, rng) -> PathEnsemble:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    gen = as_generator(rng)
    M = snap.n_centres
    R = snap.screening_window
    shape = (n_paths, M)
    lam = gen.gamma(fm.lambda_shape, 1.0, shape) / fm.lambda_rate
    if fm.r_a is not None:
        r = gen.beta(fm.r_a, fm.r_b, shape)
    else:
        r = np.full(shape, fm.r_hat)
    if fm.theta_shape is not None:
        theta = gen.gamma(fm.theta_shape, 1.0, shape) / fm.theta_rate
    elif fm.theta_hat is not None:
        theta = np.full(shape, fm.theta_hat)
    else:
        theta = None
    p = r if theta is None else r * np.exp(-theta * R)
    rate = np.einsum("ij,ij->i", p, lam)

    pc, pa = snap.pending_centre, snap.pending_arrival
    if pc.size:
        if fm.variant.screening:
            prob = np.exp(-theta[:, pc] * (pa + R - snap.t1))
            when = np.broadcast_to(pa + R, prob.shape)
        else:
            prob = r[:, pc]
            when = snap.t1 + gen.random(prob.shape) * R
        ok = gen.random(prob.shape) < prob
        bridge = np.sort(np.where(ok, when, np.inf), axis=1)
    else:
        bridge = np.zeros((n_paths, 0))
    return PathEnsemble(snap.t1, snap.t1 + R, int(snap.k.sum()), rate, bridge, gen)


# -- recruitment-time forecast -----------------------------------------------------

@dataclass(frozen=True)
class TimeSummary:
    mean: float
    sd: float
    lower: float
    median: float
    upper: float

    def covers(self, t) -> bool:
        return self.lower <= t <= self.upper


@dataclass(frozen=True)
class ForecastResult:
    t1: float
    target: int
    delta: float
    method: str
    grid: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    prob_reached: np.ndarray
    time: TimeSummary
    normal_time: TimeSummary
    n_paths: int
    seed: Optional[int]
    degenerate: bool = False
    notice: str = ""

    def to_dict(self) -> dict:
        def ts(x):
            return {"mean": x.mean, "sd": x.sd, "lower": x.lower, "median": x.median, "upper": x.upper}
        return {
            "t1": self.t1, "target": self.target, "delta": self.delta, "method": self.method,
            "n_paths": self.n_paths, "seed": self.seed, "degenerate": self.degenerate,
            "notice": self.notice, "recruitment_time": ts(self.time),
            "normal_inversion": ts(self.normal_time),
            "grid_size": int(self.grid.size),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def grid_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "mean", "var", "lower", "upper", "p_reached"])
        for row in zip(self.grid, self.mean, self.variance, self.lower, self.upper, self.prob_reached):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def _normal_quantile_time(post: _Posterior, target, zq, t_hi):
    """Earliest t with mean(t) - zq * sd(t) >= target."""
    def h(t):
        m, v = post.moments(t)
        return m - zq * math.sqrt(v) - target

    t_b = post.t1 + post.R
    if post.R > 0:
        for t in np.linspace(post.t1, t_b, 201)[1:]:
            if h(t) >= 0:
                return float(t)
    if h(t_b) >= 0:
        return float(t_b)
    hi = max(t_hi, t_b + 1.0)
    while h(hi) < 0:
        hi = t_b + 2 * (hi - t_b)
        if hi - t_b > 1e6:
            return math.inf
    return float(optimize.brentq(h, t_b, hi, xtol=1e-10))


def _normal_summary(post: _Posterior, target, delta, t_hi) -> TimeSummary:
    z = stats.norm.ppf(1 - delta / 2)
    lo = _normal_quantile_time(post, target, -z, t_hi)
    med = _normal_quantile_time(post, target, 0.0, t_hi)
    hi = _normal_quantile_time(post, target, z, t_hi)
    # moments of T from the survival function P(T > t) = 1 - Phi((mean - target) / sd)
    end = post.t1 + 2 * (hi - post.t1) + 1.0
    ts = np.linspace(post.t1, end, 4001)
    mean_k, var_k = post.curve(ts)
    sd = np.sqrt(var_k)
    with np.errstate(divide="ignore", invalid="ignore"):
        zz = np.where(sd > 0, (mean_k - target) / sd, np.where(mean_k >= target, np.inf, -np.inf))
    surv = stats.norm.sf(zz)
    mean = post.t1 + integrate.trapezoid(surv, ts)
    m2 = post.t1**2 + integrate.trapezoid(2 * ts * surv, ts)
    return TimeSummary(float(mean), float(math.sqrt(max(m2 - mean**2, 0.0))), lo, med, hi)


def _grid(t1, horizon, t_cross, size=200, densify=5):
    g = np.linspace(t1, horizon, size)
    if np.isfinite(t_cross) and t1 < t_cross < horizon:
        i = int(np.searchsorted(g, t_cross))
        a, b = g[max(i - 1, 0)], g[min(i, size - 1)]
        g = np.union1d(g, np.linspace(a, b, densify + 1))
    return g


def recruitment_time_forecast(fm: FittedModel, snap: InterimSnapshot, target: int, method: str = "paths",
                              n_paths: int = 10_000, rng=None, horizon: Optional[float] = None,
                              delta: float = 0.05, grid_size: int = 200, seed: Optional[int] = None,
                              with_grid: bool = True) -> ForecastResult:
    """Forecast when the randomized count reaches ``target``.

    ``method="paths"`` summarizes first-passage times of simulated predictive
    paths; ``method="normal"`` inverts the normal approximation
    P(T <= t) = Phi((mean(t) - target) / sd(t)). The normal-inversion summary
    is always computed as a cross-check.
    """
    if method not in ("paths", "normal"):
        raise ValueError(f"unknown method {method!r}")
    post = _Posterior(fm, snap)
    t1 = snap.t1
    if target <= post.K:
        point = TimeSummary(t1, 0.0, t1, t1, t1)
        g = np.array([t1])
        K = float(post.K)
        return ForecastResult(t1, int(target), delta, method, g, np.array([K]), np.zeros(1),
                              np.array([K]), np.array([K]), np.ones(1), point, point,
                              0, seed, degenerate=True,
                              notice=f"target {target} already reached ({post.K} randomized at t1)")

    slope = post.poisson_terms()[0]
    t_b = t1 + post.R
    bm = post.bridge(t_b)[0]
    if slope > 0:
        t_mean_cross = t_b + max(target - post.K - bm, 0.0) / slope
    else:
        t_mean_cross = math.inf
    if horizon is None:
        if not math.isfinite(t_mean_cross):
            raise HorizonError("the predictive rate is zero; target cannot be reached")
        horizon = t1 + 3.0 * (t_mean_cross - t1) + post.R + 0.5
    normal = _normal_summary(post, target, delta, horizon)

    if method == "paths":
        ens = simulate_predictive_paths(fm, snap, n_paths, rng)
        T = ens.first_passage(target)
        reached = np.mean(T <= horizon)
        if reached < 0.99:
            raise HorizonError(f"only {reached:.1%} of paths reach the target by t={horizon:g}; "
                               "increase the horizon")
        q = np.quantile(T, [delta / 2, 0.5, 1 - delta / 2])
        time = TimeSummary(float(T.mean()), float(T.std(ddof=1)) if T.size > 1 else 0.0,
                           float(q[0]), float(q[1]), float(q[2]))
    else:
        T = None
        time = normal

    if not with_grid:
        g = np.zeros(0)
        mean = var = lower = upper = p = g
    else:
        g = _grid(t1, horizon, t_mean_cross, grid_size)
        mean, var = post.curve(g)
        z = stats.norm.ppf(1 - delta / 2)
        sd = np.sqrt(var)
        lower = np.maximum(np.floor(mean - z * sd + 1e-9), post.K)
        upper = np.maximum(np.ceil(mean + z * sd - 1e-9), post.K)
        if T is not None:
            p = np.searchsorted(np.sort(T), g, side="right") / T.size
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                zz = np.where(sd > 0, (mean - target) / sd, np.where(mean >= target, np.inf, -np.inf))
            p = stats.norm.cdf(zz)
    return ForecastResult(t1, int(target), delta, method, g, mean, var, lower, upper, p,
                          time, normal, n_paths if method == "paths" else 0, seed)
