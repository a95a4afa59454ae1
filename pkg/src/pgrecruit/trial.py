"""Generative model of a multicentre trial with patient dropout.

Patients arrive at each open centre as a Poisson process whose rate is drawn
from a gamma population. Each arrival is lost immediately with probability
``1 - r_i``; under the screening models (B.*) a survivor may also be lost at
``arrival + Z`` with ``Z ~ Exp(theta_i)`` while ``Z <= R``, and is otherwise
randomized at ``arrival + R``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from .kernel import BetaParams, GammaParams, RngHandle, as_generator


class ConfigError(ValueError):
    """Invalid trial configuration. ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class Variant(str, enum.Enum):
    A1 = "A1"
    A2 = "A2"
    B1 = "B1"
    B2 = "B2"
    B3 = "B3"

    @property
    def screening(self) -> bool:
        return self.value.startswith("B")

    @property
    def random_r(self) -> bool:
        return self in (Variant.A2, Variant.B3)

    @property
    def random_theta(self) -> bool:
        return self in (Variant.B2, Variant.B3)

    @classmethod
    def parse(cls, tag) -> "Variant":
        if isinstance(tag, cls):
            return tag
        key = str(tag).upper().replace(".", "")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown model tag {tag!r}; expected one of A1, A2, B1, B2, B3") from None


def _check_r(r):
    if not 0.0 <= r <= 1.0:
        raise ConfigError("dropout.r", f"must lie in [0, 1], got {r}")


@dataclass(frozen=True)
class A1:
    r: float
    variant = Variant.A1

    def __post_init__(self):
        _check_r(self.r)


@dataclass(frozen=True)
class A2:
    psi: BetaParams
    variant = Variant.A2


@dataclass(frozen=True)
class B1:
    r: float
    theta: float
    variant = Variant.B1

    def __post_init__(self):
        _check_r(self.r)
        if not self.theta > 0:
            raise ConfigError("dropout.theta", f"must be > 0, got {self.theta}")


@dataclass(frozen=True)
class B2:
    r: float
    theta_prior: GammaParams
    variant = Variant.B2

    def __post_init__(self):
        _check_r(self.r)


@dataclass(frozen=True)
class B3:
    psi: BetaParams
    theta_prior: GammaParams
    variant = Variant.B3


DropoutSpec = Union[A1, A2, B1, B2, B3]


def mean_r(d: DropoutSpec) -> float:
    return d.psi.mean if hasattr(d, "psi") else d.r


def mean_theta(d: DropoutSpec) -> float:
    if isinstance(d, B1):
        return d.theta
    if isinstance(d, (B2, B3)):
        return d.theta_prior.mean
    return 0.0


@dataclass(frozen=True)
class TrialConfig:
    """Everything needed to generate a trial. Times are in years."""

    n_centres: int
    target: int
    recruitment: GammaParams
    dropout: DropoutSpec
    screening_window: float = 0.0
    centre_openings: Optional[tuple] = None
    horizon: Optional[float] = None

    def __post_init__(self):
        if not isinstance(self.n_centres, (int, np.integer)) or self.n_centres < 1:
            raise ConfigError("n_centres", f"must be a positive integer, got {self.n_centres!r}")
        if not isinstance(self.target, (int, np.integer)) or self.target < 1:
            raise ConfigError("target", f"must be a positive integer, got {self.target!r}")
        if self.screening_window < 0:
            raise ConfigError("screening_window", "must be >= 0")
        if not self.dropout.variant.screening and self.screening_window != 0:
            raise ConfigError("screening_window", "must be 0 for instant-dropout models A1/A2")
        if self.dropout.variant.screening and self.screening_window <= 0:
            raise ConfigError("screening_window", "must be > 0 for screening models B1/B2/B3")
        if self.centre_openings is None:
            object.__setattr__(self, "centre_openings", (0.0,) * self.n_centres)
        else:
            u = tuple(float(x) for x in self.centre_openings)
            if len(u) != self.n_centres:
                raise ConfigError("centre_openings", f"expected {self.n_centres} values, got {len(u)}")
            if min(u) < 0:
                raise ConfigError("centre_openings", "opening times must be >= 0")
            object.__setattr__(self, "centre_openings", u)
        if self.horizon is None:
            h = max(self.centre_openings) + self.screening_window + 4.0 * self.theoretical_duration()
            object.__setattr__(self, "horizon", h)
        elif self.horizon <= max(self.centre_openings):
            raise ConfigError("horizon", "must exceed the latest centre opening")

    @property
    def variant(self) -> Variant:
        return self.dropout.variant

    def theoretical_duration(self) -> float:
        """target / (M * mu * E[r] * exp(-E[theta] * R)), the naive deterministic duration."""
        p = mean_r(self.dropout) * math.exp(-mean_theta(self.dropout) * self.screening_window)
        rate = self.n_centres * self.recruitment.mean * p
        return self.target / rate if rate > 0 else math.inf


def part1_config(**overrides) -> TrialConfig:
    """Instant-dropout simulation setting: 75 centres, 750 patients, A.2 generator."""
    kw = dict(n_centres=75, target=750, recruitment=GammaParams.from_mean(1.2, 3.5),
              dropout=A2(BetaParams(4.0, 1.0)), screening_window=0.0)
    kw.update(overrides)
    return TrialConfig(**kw)


def part2_config(**overrides) -> TrialConfig:
    """Screening-dropout simulation setting: as Part I plus R = 0.2, theta_i ~ Ga(1, mean 2), B.3 generator."""
    kw = dict(n_centres=75, target=750, recruitment=GammaParams.from_mean(1.2, 3.5),
              dropout=B3(BetaParams(4.0, 1.0), GammaParams.from_mean(1.0, 2.0)),
              screening_window=0.2)
    kw.update(overrides)
    return TrialConfig(**kw)


# -- generated data -----------------------------------------------------------

class CentreLatents(NamedTuple):
    centre_id: int
    lam: float
    r: float
    theta: Optional[float]


class PatientRecord(NamedTuple):
    centre_id: int
    arrival: float
    chi: int
    z: Optional[float] = None


class Status(str, enum.Enum):
    RANDOMIZED = "RANDOMIZED"
    LOST_ON_ARRIVAL = "LOST_ON_ARRIVAL"
    LOST_IN_SCREENING = "LOST_IN_SCREENING"
    IN_SCREENING = "IN_SCREENING"


STATUS_ORDER = list(Status)
STATUS_CODE = {s: i for i, s in enumerate(STATUS_ORDER)}


class PatientStatus(NamedTuple):
    status: Status
    last_seen: float


@dataclass(frozen=True)
class Trial:
    """Columnar trial data; patients are sorted by (centre, arrival)."""

    config: TrialConfig
    lam: np.ndarray
    r: np.ndarray
    theta: np.ndarray          # nan for A-variants
    centre: np.ndarray
    arrival: np.ndarray
    chi: np.ndarray            # 1 = lost upon arrival
    z: np.ndarray              # nan for A-variants

    @property
    def n_patients(self) -> int:
        return len(self.arrival)

    def centres(self):
        has_theta = self.config.variant.screening
        return [CentreLatents(i, float(self.lam[i]), float(self.r[i]),
                              float(self.theta[i]) if has_theta else None)
                for i in range(len(self.lam))]

    def patients(self):
        has_z = self.config.variant.screening
        return [PatientRecord(int(c), float(a), int(x), float(z) if has_z else None)
                for c, a, x, z in zip(self.centre, self.arrival, self.chi, self.z)]


def generate_trial(config: TrialConfig, rng) -> Trial:
    """Draw centre latents and all arrivals on ``[u_i, horizon]``.

    Arrivals are a homogeneous Poisson process per centre, sampled as a Poisson
    count plus sorted uniform positions (same law as exponential gaps).
    """
    gen = as_generator(rng)
    M = config.n_centres
    d = config.dropout
    u = np.asarray(config.centre_openings, dtype=float)
    lam = gen.gamma(config.recruitment.shape, 1.0 / config.recruitment.rate, M)
    if isinstance(d, (A2, B3)):
        r = gen.beta(d.psi.a, d.psi.b, M)
    else:
        r = np.full(M, float(d.r))
    if isinstance(d, B1):
        theta = np.full(M, float(d.theta))
    elif isinstance(d, (B2, B3)):
        theta = gen.gamma(d.theta_prior.shape, 1.0 / d.theta_prior.rate, M)
    else:
        theta = np.full(M, np.nan)

    span = config.horizon - u
    counts = gen.poisson(lam * span)
    centre = np.repeat(np.arange(M), counts)
    arrival = u[centre] + gen.random(centre.size) * span[centre]
    order = np.lexsort((arrival, centre))
    centre, arrival = centre[order], arrival[order]
    chi = (gen.random(centre.size) >= r[centre]).astype(np.int8)
    if d.variant.screening:
        z = gen.exponential(1.0, centre.size) / theta[centre]
    else:
        z = np.full(centre.size, np.nan)
    return Trial(config, lam, r, theta, centre, arrival, chi, z)


def classify_patient(p: PatientRecord, R: float, t1: float) -> PatientStatus:
    if p.arrival > t1:
        raise ValueError(f"patient arrives at {p.arrival} after the interim time {t1}")
    if p.chi == 1:
        return PatientStatus(Status.LOST_ON_ARRIVAL, p.arrival)
    z = math.inf if p.z is None or math.isnan(p.z) else p.z
    if z <= min(R, t1 - p.arrival):
        return PatientStatus(Status.LOST_IN_SCREENING, p.arrival + z)
    if p.arrival <= t1 - R:
        return PatientStatus(Status.RANDOMIZED, p.arrival + R)
    return PatientStatus(Status.IN_SCREENING, t1)


def classify_arrays(arrival, chi, z, R, t1):
    """Vectorized :func:`classify_patient`; returns (status codes, last_seen)."""
    z = np.where(np.isnan(z), np.inf, z)
    lost_arr = chi == 1
    lost_scr = ~lost_arr & (z <= np.minimum(R, t1 - arrival))
    rand = ~lost_arr & ~lost_scr & (arrival <= t1 - R)
    code = np.full(arrival.shape, STATUS_CODE[Status.IN_SCREENING], dtype=np.int8)
    code[rand] = STATUS_CODE[Status.RANDOMIZED]
    code[lost_scr] = STATUS_CODE[Status.LOST_IN_SCREENING]
    code[lost_arr] = STATUS_CODE[Status.LOST_ON_ARRIVAL]
    last = np.full(arrival.shape, float(t1))
    last[rand] = arrival[rand] + R
    last[lost_scr] = arrival[lost_scr] + z[lost_scr]
    last[lost_arr] = arrival[lost_arr]
    return code, last


@dataclass(frozen=True)
class InterimSnapshot:
    """Per-centre sufficient statistics observed at the interim time ``t1``.

    ``pending_centre``/``pending_arrival`` list the patients still in
    screening (outcome unknown) as flat arrays.
    """

    t1: float
    screening_window: float
    tau: np.ndarray
    n: np.ndarray
    k: np.ndarray
    k_tilde: np.ndarray
    l: np.ndarray
    t_screen: np.ndarray
    nu: np.ndarray
    pending_centre: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pending_arrival: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n_centres(self) -> int:
        return len(self.tau)

    @property
    def open(self) -> np.ndarray:
        return self.tau > 0

    @property
    def randomized(self) -> int:
        return int(self.k.sum())

    @property
    def pending_arrivals(self):
        return [self.pending_arrival[self.pending_centre == i] for i in range(self.n_centres)]

    @classmethod
    def from_status(cls, t1, R, openings, centre, arrival, code, last_seen):
        """Aggregate classified patients (all with arrival <= t1) per centre."""
        openings = np.asarray(openings, dtype=float)
        M = len(openings)
        centre = np.asarray(centre, dtype=np.int64)
        arrival = np.asarray(arrival, dtype=float)
        code = np.asarray(code)
        last_seen = np.asarray(last_seen, dtype=float)

        def count(mask):
            return np.bincount(centre[mask], minlength=M).astype(np.int64)

        pend = code == STATUS_CODE[Status.IN_SCREENING]
        k = count(code == STATUS_CODE[Status.RANDOMIZED])
        n = np.bincount(centre, minlength=M).astype(np.int64)
        return cls(
            t1=float(t1),
            screening_window=float(R),
            tau=np.maximum(t1 - openings, 0.0),
            n=n,
            k=k,
            k_tilde=n - count(code == STATUS_CODE[Status.LOST_ON_ARRIVAL]),
            l=count(code == STATUS_CODE[Status.LOST_IN_SCREENING]),
            t_screen=np.bincount(centre, weights=last_seen - arrival, minlength=M),
            nu=count(pend),
            pending_centre=centre[pend],
            pending_arrival=arrival[pend],
        )


def take_snapshot(trial: Trial, t1: float) -> InterimSnapshot:
    if not t1 > 0:
        raise ValueError("t1 must be > 0")
    R = trial.config.screening_window
    seen = trial.arrival <= t1
    code, last = classify_arrays(trial.arrival[seen], trial.chi[seen], trial.z[seen], R, t1)
    return InterimSnapshot.from_status(t1, R, trial.config.centre_openings,
                                       trial.centre[seen], trial.arrival[seen], code, last)


def randomization_times(trial: Trial) -> np.ndarray:
    """Sorted randomization times of all surviving patients (within the horizon)."""
    R = trial.config.screening_window
    ok = trial.chi == 0
    if trial.config.variant.screening:
        ok &= trial.z > R
    t = trial.arrival[ok] + R
    return np.sort(t[t <= trial.config.horizon])


NOT_REACHED = math.inf


def recruitment_stop_time(trial: Trial) -> float:
    """First time the randomized count reaches the target, else ``NOT_REACHED``."""
    t = randomization_times(trial)
    target = trial.config.target
    return float(t[target - 1]) if t.size >= target else NOT_REACHED
