import sys

import numpy as np
from hypothesis import settings

from pgrecruit.kernel import GammaParams
from pgrecruit.trial import A1, B1, InterimSnapshot, Trial, TrialConfig

# fixed example sequence so repeated runs test the same inputs
settings.register_profile("repeatable", derandomize=True)
settings.load_profile("repeatable")


def make_trial(config, centre, arrival, chi, z=None, lam=None, r=None, theta=None):
    """A hand-built Trial; latents default to placeholders irrelevant to classification."""
    M = config.n_centres
    centre = np.asarray(centre, dtype=np.int64)
    arrival = np.asarray(arrival, dtype=float)
    order = np.lexsort((arrival, centre))
    z = np.full(centre.size, np.nan) if z is None else np.asarray(z, dtype=float)
    return Trial(config,
                 np.full(M, 1.0) if lam is None else np.asarray(lam, float),
                 np.full(M, 0.8) if r is None else np.asarray(r, float),
                 np.full(M, np.nan) if theta is None else np.asarray(theta, float),
                 centre[order], arrival[order], np.asarray(chi, dtype=np.int8)[order], z[order])


def screening_config(M=1, R=0.2, target=10, theta=1.0, **kw):
    return TrialConfig(n_centres=M, target=target, recruitment=GammaParams(1.0, 1.0),
                       dropout=B1(0.8, theta), screening_window=R, **kw)


def instant_config(M=1, target=10, r=0.8, **kw):
    return TrialConfig(n_centres=M, target=target, recruitment=GammaParams(1.0, 1.0), dropout=A1(r), **kw)


def snapshot(t1=3.0, R=0.0, tau=None, n=None, k=None, k_tilde=None, l=None, t_screen=None, nu=None,
             pending_centre=(), pending_arrival=()):
    """InterimSnapshot from per-centre lists; unspecified statistics default to the A-variant values."""
    n = np.asarray(n, dtype=np.int64)
    M = n.size
    zeros = np.zeros(M, dtype=np.int64)
    return InterimSnapshot(
        t1=float(t1), screening_window=float(R),
        tau=np.full(M, float(t1)) if tau is None else np.asarray(tau, float),
        n=n,
        k=n.copy() if k is None else np.asarray(k, np.int64),
        k_tilde=(n.copy() if k is None else np.asarray(k, np.int64)) if k_tilde is None
        else np.asarray(k_tilde, np.int64),
        l=zeros.copy() if l is None else np.asarray(l, np.int64),
        t_screen=np.zeros(M) if t_screen is None else np.asarray(t_screen, float),
        nu=zeros.copy() if nu is None else np.asarray(nu, np.int64),
        pending_centre=np.asarray(pending_centre, dtype=np.int64),
        pending_arrival=np.asarray(pending_arrival, dtype=float),
    )


MODELS = ("A1", "A2", "B1", "B2", "B3")


def random_case(rng, model, R=None):
    """Random interim snapshot and fitted model with pending patients and random hyperparameters."""
    from pgrecruit.estimation import build_fitted

    screening = model.startswith("B")
    if R is None:
        R = float(rng.uniform(0.1, 0.4))
    M = int(rng.integers(3, 12))
    t1 = 2.0
    tau = rng.uniform(0.5, t1, M)
    done = rng.poisson(3.0 * tau)
    nu = rng.integers(0, 4, M) if R > 0 else np.zeros(M, dtype=np.int64)
    kept = rng.binomial(done, 0.8)
    if screening:
        l = rng.binomial(kept, 0.3)
        k = kept - l
        k_tilde = kept + nu
        t_screen = l * rng.uniform(0.05, R) + k * R
    else:
        l, k, k_tilde, t_screen = None, kept, None, None
    pc = np.repeat(np.arange(M), nu)
    pa = t1 - rng.uniform(0, R, pc.size)
    snap = snapshot(t1=t1, R=R, tau=tau, n=done + nu, k=k, k_tilde=k_tilde, l=l, t_screen=t_screen, nu=nu,
                    pending_centre=pc, pending_arrival=pa)
    fm = build_fitted(snap, model, alpha=rng.uniform(0.8, 3), mu=rng.uniform(1, 5), r=rng.uniform(0.5, 0.95),
                      theta=rng.uniform(0.5, 3), psi=rng.uniform(1, 8, 2), theta_prior=rng.uniform(0.5, 4, 2))
    return snap, fm


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, failures = results[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'FAIL' if failures else 'PASS'}")
        for msg in failures:
            terminalreporter.write_line(f"    {msg}")
