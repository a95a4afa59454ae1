"""Command-line front end: ``pgrecruit simulate | estimate | predict | study``.

Exit codes: 0 success, 2 configuration or argument error, 3 data that cannot
support the request (model mismatch, too little data), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings
from importlib import resources

from . import __version__
from . import config as cfgmod
from .estimation import ClampWarning, FitError, FittedModel, InsufficientDataError, OptimizerError, fit
from .interchange import DataError, read_patients, write_latents, write_patients
from .kernel import DomainError, RngHandle
from .prediction import HorizonError, recruitment_time_forecast
from .study import manifest, run_study
from .trial import ConfigError, Variant, generate_trial

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package, e.g. ``load_schema("forecast")``."""
    return json.loads((resources.files("pgrecruit") / "schemas" / f"{name}.schema.json").read_text())


def _load_config(path, overrides=None):
    cfg = cfgmod.load(path) if path else cfgmod.parse_config(None)
    if overrides:
        doc = cfgmod.plan_to_document(cfg.plan, cfg.seed)
        for section, values in overrides.items():
            doc[section].update({k: v for k, v in values.items() if v is not None})
        cfg = cfgmod.RunConfig(raw=cfg.raw, plan=cfgmod.parse_config(doc).plan, seed=cfg.seed)
    return cfg


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _run_manifest(cfg, command, seed, extra=None):
    out = {
        "command": command,
        "software": {"package": "pgrecruit", "version": __version__},
        "seed": seed,
        "config": cfg.raw,
        "resolved": cfgmod.plan_to_document(cfg.plan, cfg.seed),
    }
    out.update(extra or {})
    return out


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    trial = generate_trial(cfg.trial, RngHandle(seed))
    os.makedirs(args.out, exist_ok=True)
    write_patients(trial, os.path.join(args.out, "patients.csv"), at=args.t1)
    write_latents(trial, os.path.join(args.out, "latents.csv"))
    _write_json(os.path.join(args.out, "manifest.json"),
                _run_manifest(cfg, "simulate", seed, {"status_time": args.t1 or cfg.trial.horizon}))
    return EXIT_OK


def _snapshot(data_path, model: Variant, t1):
    table = read_patients(data_path)
    if model.screening:
        table.require_screening()
    return table.snapshot(t1)


def cmd_estimate(args) -> int:
    model = Variant.parse(args.model)
    snap = _snapshot(args.data, model, args.t1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ClampWarning)
        fm = fit(snap, model)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _write_json(args.out, fm.to_dict())
    return EXIT_OK


def cmd_predict(args) -> int:
    with open(args.fitted) as fh:
        fm = FittedModel.from_dict(json.load(fh))
    snap = _snapshot(args.data, fm.variant, fm.t1)
    if abs(snap.screening_window - fm.screening_window) > 1e-9:
        raise DataError("screening window of the data differs from the fitted model")
    target = args.target
    if target is None:
        if not args.config:
            raise ConfigError("target", "give --target or a --config with trial.target")
        target = _load_config(args.config).trial.target
    seed = 0 if args.seed is None else args.seed
    fr = recruitment_time_forecast(fm, snap, target, method=args.method, n_paths=args.paths,
                                   rng=RngHandle(seed), horizon=args.horizon, delta=args.delta, seed=seed)
    if fr.degenerate:
        print(f"notice: {fr.notice}", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "forecast.json"), fr.to_dict())
    with open(os.path.join(args.out, "grid.csv"), "w") as fh:
        fh.write(fr.grid_csv())
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _load_config(args.config, {"study": {"n_replications": args.replications},
                                     "forecast": {"paths": args.paths, "method": args.method}})
    t0 = time.perf_counter()
    report = run_study(cfg.plan, workers=args.workers)
    runtime = time.perf_counter() - t0
    report.write(args.out, manifest(cfg.plan, runtime, args.workers, {"config": cfg.raw}))
    for row in report.failures:
        print(f"replication {row['rep']} failed: {row['error']}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgrecruit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate one trial and write its patient and latent CSVs")
    s.add_argument("--config", help="YAML config file or bundled plan name (default: built-in defaults)")
    s.add_argument("--seed", type=int)
    s.add_argument("--t1", type=float, help="record statuses as seen at this time (default: horizon)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="fit a model to patient data censored at t1")
    e.add_argument("data", help="patient CSV")
    e.add_argument("--model", required=True, choices=[v.value for v in Variant])
    e.add_argument("--t1", type=float, required=True)
    e.add_argument("--out", default="-", help="FittedModel JSON path (default: stdout)")
    e.set_defaults(func=cmd_estimate)

    f = sub.add_parser("predict", help="forecast the time to reach the randomization target")
    f.add_argument("fitted", help="FittedModel JSON written by 'estimate'")
    f.add_argument("data", help="patient CSV the model was fitted to")
    f.add_argument("--target", type=int)
    f.add_argument("--config", help="take the target from this config")
    f.add_argument("--horizon", type=float)
    f.add_argument("--method", choices=["paths", "normal"], default="paths")
    f.add_argument("--paths", type=int, default=10_000)
    f.add_argument("--delta", type=float, default=0.05)
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True, help="output directory (forecast.json, grid.csv)")
    f.set_defaults(func=cmd_predict)

    st = sub.add_parser("study", help="run a Monte Carlo replication study")
    st.add_argument("--config", required=True, help="plan file or bundled plan name (part1, part2)")
    st.add_argument("--workers", type=int, default=1)
    st.add_argument("--replications", type=int, help="override study.n_replications")
    st.add_argument("--paths", type=int, help="override forecast.paths")
    st.add_argument("--method", choices=["paths", "normal"], help="override forecast.method")
    st.add_argument("--out", required=True, help="output directory")
    st.set_defaults(func=cmd_study)
    return p


def _classify(exc) -> int:
    if isinstance(exc, FitError):
        return _classify(exc.cause)
    if isinstance(exc, (DataError, InsufficientDataError)):
        return EXIT_DATA
    if isinstance(exc, (OptimizerError, HorizonError, DomainError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (ConfigError, ValueError)):
        return EXIT_CONFIG
    return EXIT_NUMERIC


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, DataError, InsufficientDataError, FitError, OptimizerError, HorizonError,
            DomainError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _classify(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
