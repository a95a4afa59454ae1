"""YAML run configuration: trial setting, study plan, optimizer and forecast settings.

Every key is optional; omitted keys take the defaults below (the instant-dropout
simulation setting). Unknown keys are rejected with a :class:`ConfigError`
naming the dotted path of the offending entry.

.. code-block:: yaml

    name: part1
    seed: 7                       # default seed for ``simulate``/``predict``
    trial:
      n_centres: 75
      target: 750
      recruitment: {shape: 1.2, mean: 3.5}     # or {shape, rate}
      dropout: {model: A2, psi: [4, 1]}        # A1: r; B1: r, theta;
                                               # B2: r, theta_prior; B3: psi, theta_prior
      screening_window: 0.0
      centre_openings: null       # scalar, list of M values, or null (all 0)
      horizon: null               # null: 4x the deterministic duration
    study:
      interim_times: [1.0, 1.5, 2.0]
      models: [A1, A2]
      n_replications: 500
      base_seed: 20240601
    forecast: {method: paths, paths: 2000, delta: 0.05}
    optimizer: {max_evals: 2000, rel_tol: 1.0e-7, restarts: 3}
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import yaml

from .estimation import OptimizerSettings
from .kernel import BetaParams, DomainError, GammaParams
from .study import ForecastSettings, StudyPlan
from .trial import A1, A2, B1, B2, B3, ConfigError, TrialConfig, Variant

DEFAULTS = {
    "name": "study",
    "seed": 0,
    "trial": {
        "n_centres": 75,
        "target": 750,
        "recruitment": {"shape": 1.2, "mean": 3.5},
        "dropout": {"model": "A2", "psi": [4.0, 1.0]},
        "screening_window": 0.0,
        "centre_openings": None,
        "horizon": None,
    },
    "study": {
        "interim_times": [1.0, 1.5, 2.0],
        "models": ["A1", "A2"],
        "n_replications": 500,
        "base_seed": 20240601,
    },
    "forecast": {"method": "paths", "paths": 2000, "delta": 0.05},
    "optimizer": {"max_evals": 2000, "rel_tol": 1e-7, "restarts": 3},
}

_DROPOUT_KEYS = {
    Variant.A1: {"r"},
    Variant.A2: {"psi"},
    Variant.B1: {"r", "theta"},
    Variant.B2: {"r", "theta_prior"},
    Variant.B3: {"psi", "theta_prior"},
}


# mappings merged key by key; any other value (e.g. dropout) replaces its default whole
_SECTIONS = {"trial", "study", "forecast", "optimizer"}


@dataclass(frozen=True)
class RunConfig:
    """A parsed configuration document plus the objects built from it."""

    raw: dict
    plan: StudyPlan
    seed: int

    @property
    def trial(self) -> TrialConfig:
        return self.plan.config


def _merge(defaults, doc, path=""):
    if doc is None:
        return copy.deepcopy(defaults)
    if not isinstance(doc, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(doc).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in doc.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(where, "unknown key")
        if key in _SECTIONS:
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _number(where, value, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(where, f"expected a number, got {value!r}")
    if kind is int:
        if value != int(value):
            raise ConfigError(where, f"expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _gamma(where, doc) -> GammaParams:
    if not isinstance(doc, dict):
        raise ConfigError(where, "expected a mapping with shape and mean (or rate)")
    extra = set(doc) - {"shape", "mean", "rate"}
    if extra:
        raise ConfigError(f"{where}.{sorted(extra)[0]}", "unknown key")
    if "shape" not in doc or ("mean" in doc) == ("rate" in doc):
        raise ConfigError(where, "give shape and exactly one of mean, rate")
    shape = _number(f"{where}.shape", doc["shape"])
    try:
        if "mean" in doc:
            mean = _number(f"{where}.mean", doc["mean"])
            if mean <= 0:
                raise DomainError("mean must be > 0")
            return GammaParams.from_mean(shape, mean)
        return GammaParams(shape, _number(f"{where}.rate", doc["rate"]))
    except DomainError as exc:
        raise ConfigError(where, str(exc)) from None


def _beta(where, value) -> BetaParams:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(where, "expected a pair [a, b]")
    try:
        return BetaParams(_number(f"{where}[0]", value[0]), _number(f"{where}[1]", value[1]))
    except DomainError as exc:
        raise ConfigError(where, str(exc)) from None


def _dropout(doc):
    where = "trial.dropout"
    if not isinstance(doc, dict) or "model" not in doc:
        raise ConfigError(where, "expected a mapping with a model tag")
    try:
        variant = Variant.parse(doc["model"])
    except ValueError as exc:
        raise ConfigError(f"{where}.model", str(exc)) from None
    given = set(doc) - {"model"}
    allowed = _DROPOUT_KEYS[variant]
    if given - allowed:
        raise ConfigError(f"{where}.{sorted(given - allowed)[0]}", f"unknown key for model {variant.value}")
    if allowed - given:
        raise ConfigError(f"{where}.{sorted(allowed - given)[0]}", f"required for model {variant.value}")
    kw = {}
    if "r" in allowed:
        kw["r"] = _number(f"{where}.r", doc["r"])
    if "psi" in allowed:
        kw["psi"] = _beta(f"{where}.psi", doc["psi"])
    if "theta" in allowed:
        kw["theta"] = _number(f"{where}.theta", doc["theta"])
    if "theta_prior" in allowed:
        kw["theta_prior"] = _gamma(f"{where}.theta_prior", doc["theta_prior"])
    cls = {Variant.A1: A1, Variant.A2: A2, Variant.B1: B1, Variant.B2: B2, Variant.B3: B3}[variant]
    try:
        return cls(**kw)
    except ConfigError as exc:
        raise ConfigError(f"trial.{exc.field}", str(exc).split(": ", 1)[-1]) from None


def build_trial_config(doc: dict) -> TrialConfig:
    t = _merge(DEFAULTS["trial"], doc, "trial")
    openings = t["centre_openings"]
    n = _number("trial.n_centres", t["n_centres"], int)
    if openings is not None and not isinstance(openings, (list, tuple)):
        openings = [_number("trial.centre_openings", openings)] * max(n, 0)
    try:
        return TrialConfig(
            n_centres=n,
            target=_number("trial.target", t["target"], int),
            recruitment=_gamma("trial.recruitment", t["recruitment"]),
            dropout=_dropout(t["dropout"]),
            screening_window=_number("trial.screening_window", t["screening_window"]),
            centre_openings=None if openings is None else tuple(openings),
            horizon=None if t["horizon"] is None else _number("trial.horizon", t["horizon"]),
        )
    except ConfigError as exc:
        if exc.field.startswith("trial."):
            raise
        raise ConfigError(f"trial.{exc.field}", str(exc).split(": ", 1)[-1]) from None


def parse_config(doc: Optional[dict]) -> RunConfig:
    """Validate a configuration document (already parsed from YAML)."""
    full = _merge(DEFAULTS, doc)
    trial = build_trial_config(full["trial"])
    s, f, o = full["study"], full["forecast"], full["optimizer"]
    try:
        forecast = ForecastSettings(method=f["method"], n_paths=_number("forecast.paths", f["paths"], int),
                                    delta=_number("forecast.delta", f["delta"]))
    except ValueError as exc:
        field, _, msg = str(exc).partition(": ")
        raise ConfigError(field.replace("n_paths", "paths"), msg) from None
    optimizer = OptimizerSettings(max_evals=_number("optimizer.max_evals", o["max_evals"], int),
                                  rel_tol=_number("optimizer.rel_tol", o["rel_tol"]),
                                  restarts=_number("optimizer.restarts", o["restarts"], int))
    if not isinstance(s["interim_times"], (list, tuple)):
        raise ConfigError("study.interim_times", "expected a list of times")
    if not isinstance(s["models"], (list, tuple)):
        raise ConfigError("study.models", "expected a list of model tags")
    try:
        models = tuple(Variant.parse(m) for m in s["models"])
    except ValueError as exc:
        raise ConfigError("study.models", str(exc)) from None
    try:
        plan = StudyPlan(
            config=trial,
            interim_times=tuple(_number("study.interim_times", t) for t in s["interim_times"]),
            models=models,
            n_replications=_number("study.n_replications", s["n_replications"], int),
            base_seed=_number("study.base_seed", s["base_seed"], int),
            forecast=forecast,
            optimizer=optimizer,
            name=str(full["name"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("study", str(exc)) from None
    return RunConfig(raw=copy.deepcopy(doc or {}), plan=plan, seed=_number("seed", full["seed"], int))


def loads(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML: {exc}") from None
    return parse_config(doc)


def load(path) -> RunConfig:
    """Read a configuration file. A bare name such as ``part1`` selects a bundled plan."""
    name = str(path)
    bundled = resources.files("pgrecruit") / "plans" / (name if name.endswith(".plan") else name + ".plan")
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        if "/" in name or not bundled.is_file():
            raise ConfigError("<file>", f"no such configuration file: {path}") from None
        text = bundled.read_text()
    return loads(text)


def bundled_plans() -> list:
    return sorted(p.name for p in (resources.files("pgrecruit") / "plans").iterdir() if p.name.endswith(".plan"))


def _gamma_dict(g: GammaParams) -> dict:
    return {"shape": g.shape, "rate": g.rate}


def config_to_dict(config: TrialConfig) -> dict:
    """Inverse of :func:`build_trial_config` (gamma laws written in shape/rate form)."""
    d = config.dropout
    dropout = {"model": d.variant.value}
    if hasattr(d, "r"):
        dropout["r"] = d.r
    if hasattr(d, "psi"):
        dropout["psi"] = [d.psi.a, d.psi.b]
    if isinstance(d, B1):
        dropout["theta"] = d.theta
    if hasattr(d, "theta_prior"):
        dropout["theta_prior"] = _gamma_dict(d.theta_prior)
    return {
        "n_centres": config.n_centres,
        "target": config.target,
        "recruitment": _gamma_dict(config.recruitment),
        "dropout": dropout,
        "screening_window": config.screening_window,
        "centre_openings": list(config.centre_openings),
        "horizon": config.horizon,
    }


def plan_to_document(plan: StudyPlan, seed: int = 0) -> dict:
    """A full configuration document that :func:`parse_config` maps back to ``plan``."""
    return {
        "name": plan.name,
        "seed": seed,
        "trial": config_to_dict(plan.config),
        "study": {"interim_times": list(plan.interim_times), "models": [m.value for m in plan.models],
                  "n_replications": plan.n_replications, "base_seed": plan.base_seed},
        "forecast": {"method": plan.forecast.method, "paths": plan.forecast.n_paths, "delta": plan.forecast.delta},
        "optimizer": {"max_evals": plan.optimizer.max_evals, "rel_tol": plan.optimizer.rel_tol,
                      "restarts": plan.optimizer.restarts},
    }


def dumps(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=False)
