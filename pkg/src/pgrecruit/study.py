"""Monte Carlo replication study: generate, snapshot, fit, forecast, aggregate."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from .estimation import ClampWarning, OptimizerSettings, fit
from .kernel import RngHandle
from .prediction import recruitment_time_forecast
from .trial import TrialConfig, Variant, generate_trial, part1_config, part2_config, \
    recruitment_stop_time, take_snapshot

_VARIANT_INDEX = {v: i for i, v in enumerate(Variant)}


@dataclass(frozen=True)
class ForecastSettings:
    method: str = "paths"
    n_paths: int = 2000
    delta: float = 0.05

    def __post_init__(self):
        if self.method not in ("paths", "normal"):
            raise ValueError(f"forecast.method: unknown method {self.method!r}")
        if self.n_paths < 1:
            raise ValueError("forecast.n_paths: must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("forecast.delta: must lie in (0, 1)")


@dataclass(frozen=True)
class StudyPlan:
    config: TrialConfig
    interim_times: tuple
    models: tuple
    n_replications: int = 500
    base_seed: int = 20240601
    forecast: ForecastSettings = ForecastSettings()
    optimizer: OptimizerSettings = OptimizerSettings(rel_tol=1e-7)
    name: str = "study"

    def __post_init__(self):
        ts = tuple(float(t) for t in self.interim_times)
        if not ts or any(t <= 0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("interim_times must be positive and strictly increasing")
        object.__setattr__(self, "interim_times", ts)
        object.__setattr__(self, "models", tuple(Variant.parse(m) for m in self.models))
        if not self.models:
            raise ValueError("models must not be empty")
        if self.n_replications < 1:
            raise ValueError("n_replications must be >= 1")


def part1_plan(**overrides) -> StudyPlan:
    kw = dict(config=part1_config(), interim_times=(1.0, 1.5, 2.0), models=("A1", "A2"), name="part1")
    kw.update(overrides)
    return StudyPlan(**kw)


def part2_plan(**overrides) -> StudyPlan:
    kw = dict(config=part2_config(), interim_times=(1.0, 2.0, 3.0), models=("B1", "B2", "B3"), name="part2")
    kw.update(overrides)
    return StudyPlan(**kw)


def replication_rng(plan: StudyPlan, rep: int) -> RngHandle:
    return RngHandle(plan.base_seed, rep)


def forecast_rng(plan: StudyPlan, rep: int, t1: float, model: Variant) -> RngHandle:
    # keyed by values, not positions, so editing a plan never reshuffles other cells
    return replication_rng(plan, rep).child(1, int(round(t1 * 1e6)), _VARIANT_INDEX[model])


def run_replication(plan: StudyPlan, rep: int) -> dict:
    """One replication: every (t1, model) cell sharing a single generated trial."""
    trial = generate_trial(plan.config, replication_rng(plan, rep).child(0))
    observed = recruitment_stop_time(trial)
    cells = []
    fs = plan.forecast
    for t1 in plan.interim_times:
        snap = take_snapshot(trial, t1) if t1 < observed else None
        shared = {}
        for model in plan.models:
            if snap is None:
                point = {"mean": observed, "sd": 0.0, "lower": observed, "median": observed, "upper": observed}
                cells.append({"t1": t1, "model": model.value, "estimates": {}, "forecast": point,
                              "normal": point, "completed_before_interim": True})
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ClampWarning)
                fm = fit(snap, model, plan.optimizer, cache=shared)
            fr = recruitment_time_forecast(fm, snap, plan.config.target, method=fs.method, n_paths=fs.n_paths,
                                           rng=forecast_rng(plan, rep, t1, model), delta=fs.delta,
                                           with_grid=False)
            cells.append({"t1": t1, "model": model.value, "estimates": fm.estimates(),
                          "forecast": asdict(fr.time), "normal": asdict(fr.normal_time),
                          "completed_before_interim": False})
    return {"rep": rep, "observed": observed, "cells": cells}


def _safe_replication(args):
    plan, rep = args
    try:
        return run_replication(plan, rep)
    except Exception as exc:  # recorded and excluded from aggregates
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}",
                "seed": [plan.base_seed, rep]}


def _mean_sd(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    return float(x.mean()), float(x.std(ddof=1)) if x.size > 1 else 0.0


def summarize_estimates(records) -> list:
    """Mean and SD of every estimated quantity per (model, t1, parameter)."""
    groups = {}
    for rec in records:
        for cell in rec["cells"]:
            for name, value in cell["estimates"].items():
                groups.setdefault((cell["model"], cell["t1"], name), []).append(value)
    rows = []
    for (model, t1, name), vals in sorted(groups.items()):
        m, s = _mean_sd(vals)
        rows.append({"model": model, "t1": t1, "parameter": name, "mean": m, "sd": s, "n": len(vals)})
    return rows


def summarize_durations(records, key="forecast") -> list:
    """Accuracy of the forecast recruitment time against the observed duration.

    ``pct_bias`` is the mean absolute relative error in percent;
    ``pct_bias_of_means`` is the signed relative difference of the averages.
    """
    groups = {}
    for rec in records:
        for cell in rec["cells"]:
            groups.setdefault((cell["model"], cell["t1"]), []).append((rec["observed"], cell[key]))
    obs_mean = float(np.mean([r["observed"] for r in records])) if records else math.nan
    rows = []
    for (model, t1), items in sorted(groups.items()):
        obs = np.array([o for o, _ in items])
        est = np.array([f["mean"] for _, f in items])
        lo = np.array([f["lower"] for _, f in items])
        hi = np.array([f["upper"] for _, f in items])
        m, s = _mean_sd(est)
        rows.append({
            "model": model, "t1": t1, "mean": m, "sd": s,
            "pct_bias": float(100 * np.mean(np.abs(est - obs) / obs)),
            "pct_bias_of_means": float(100 * (m - obs_mean) / obs_mean),
            "coverage": float(np.mean((lo <= obs) & (obs <= hi))),
            "median": float(np.mean([f["median"] for _, f in items])),
            "n": len(items),
        })
    return rows


def export_figure_data(records, kind: str) -> list:
    """Long-format rows (replication, t1, model, quantity, value) for plotting."""
    if kind not in ("param-dist", "duration-dist"):
        raise ValueError(f"unknown figure kind {kind!r}")
    if not records:
        raise ValueError("no records to export")
    rows = []
    for rec in records:
        for cell in rec["cells"]:
            base = (rec["rep"], cell["t1"], cell["model"])
            if kind == "param-dist":
                for name, value in cell["estimates"].items():
                    rows.append((*base, name, value))
            else:
                f = cell["forecast"]
                rows.append((*base, "forecast_mean", f["mean"]))
                rows.append((*base, "forecast_median", f["median"]))
                rows.append((*base, "forecast_lower", f["lower"]))
                rows.append((*base, "forecast_upper", f["upper"]))
                rows.append((*base, "observed_duration", rec["observed"]))
    return rows


@dataclass
class StudyReport:
    plan_name: str
    estimates: list
    durations: list
    durations_normal: list
    observed_mean: float
    observed_sd: float
    n_ok: int
    failures: list
    records: list = field(repr=False, default_factory=list)

    def estimate(self, model, t1, parameter) -> dict:
        for row in self.estimates:
            if row["model"] == Variant.parse(model).value and row["t1"] == t1 and row["parameter"] == parameter:
                return row
        raise KeyError((model, t1, parameter))

    def duration(self, model, t1, normal=False) -> dict:
        for row in (self.durations_normal if normal else self.durations):
            if row["model"] == Variant.parse(model).value and row["t1"] == t1:
                return row
        raise KeyError((model, t1))

    def to_dict(self, with_records=False) -> dict:
        out = {
            "plan": self.plan_name,
            "n_ok": self.n_ok,
            "failures": self.failures,
            "observed": {"mean": self.observed_mean, "sd": self.observed_sd},
            "estimates": self.estimates,
            "durations": self.durations,
            "durations_normal_inversion": self.durations_normal,
        }
        if with_records:
            out["records"] = self.records
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir, manifest: Optional[dict] = None):
        os.makedirs(os.path.join(out_dir, "figures"), exist_ok=True)
        _write_csv(os.path.join(out_dir, "table2.csv"), ["model", "t1", "parameter", "mean", "sd", "n"],
                   [[r[k] for k in ("model", "t1", "parameter", "mean", "sd", "n")] for r in self.estimates])
        cols = ["model", "t1", "mean", "sd", "pct_bias", "coverage", "median", "pct_bias_of_means", "n"]
        a_rows = [r for r in self.durations if r["model"].startswith("A")]
        b_rows = [r for r in self.durations if r["model"].startswith("B")]
        for name, rows in (("table3.csv", a_rows), ("table4.csv", b_rows)):
            if rows:
                _write_csv(os.path.join(out_dir, name), cols, [[r[k] for k in cols] for r in rows])
        head = ["replication", "t1", "model", "quantity", "value"]
        for kind in ("param-dist", "duration-dist"):
            _write_csv(os.path.join(out_dir, "figures", f"{kind}.csv"), head, export_figure_data(self.records, kind))
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_json())
        if manifest is not None:
            with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def run_study(plan: StudyPlan, workers: int = 1, progress=None) -> StudyReport:
    """Run every replication of ``plan``; results do not depend on ``workers``."""
    jobs = [(plan, rep) for rep in range(plan.n_replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_replication, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = []
        for job in jobs:
            results.append(_safe_replication(job))
            if progress:
                progress(len(results), len(jobs))
    results.sort(key=lambda r: r["rep"])
    ok = [r for r in results if "error" not in r]
    failures = [r for r in results if "error" in r]
    obs_mean, obs_sd = _mean_sd([r["observed"] for r in ok])
    return StudyReport(plan.name, summarize_estimates(ok), summarize_durations(ok, "forecast"),
                       summarize_durations(ok, "normal"), obs_mean, obs_sd, len(ok), failures, ok)


def manifest(plan: StudyPlan, runtime: float, workers: int, extra=None) -> dict:
    out = {
        "software": {"package": "pgrecruit", "version": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
        "plan": plan_to_dict(plan),
        "seeds": {"base_seed": plan.base_seed,
                  "replication_stream": "RngHandle(base_seed, stream_id=replication)"},
        "runtime_seconds": runtime,
        "workers": workers,
    }
    if extra:
        out.update(extra)
    return out


def plan_to_dict(plan: StudyPlan) -> dict:
    """The plan as a configuration document that loads back to an equal plan."""
    from .config import plan_to_document
    return plan_to_document(plan)


def timed_study(plan: StudyPlan, workers: int = 1):
    t0 = time.perf_counter()
    report = run_study(plan, workers)
    return report, time.perf_counter() - t0
