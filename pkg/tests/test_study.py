import json

import jsonschema
import numpy as np
import pytest

from pgrecruit.cli import load_schema
from pgrecruit.config import parse_config
from pgrecruit.study import (ForecastSettings, StudyPlan, export_figure_data, forecast_rng, manifest, part1_plan,
                             part2_plan, plan_to_dict, replication_rng, run_replication, run_study)
from pgrecruit.trial import Variant, part1_config


def small_plan(**kw):
    base = dict(n_replications=3, interim_times=(1.0, 2.0), forecast=ForecastSettings(n_paths=200))
    base.update(kw)
    return part1_plan(**base)


@pytest.fixture(scope="module")
def report():
    return run_study(small_plan())


def test_plan_validation():
    with pytest.raises(ValueError):
        part1_plan(interim_times=(2.0, 1.0))
    with pytest.raises(ValueError):
        part1_plan(interim_times=(0.0, 1.0))
    with pytest.raises(ValueError):
        part1_plan(n_replications=0)
    with pytest.raises(ValueError):
        part1_plan(models=())
    with pytest.raises(ValueError):
        ForecastSettings(delta=1.0)
    assert part2_plan().models == (Variant.B1, Variant.B2, Variant.B3)


def test_rng_streams_are_keyed_by_value():
    plan = small_plan()
    a = forecast_rng(plan, 2, 1.0, Variant.A2).generator.random(3)
    moved = small_plan(interim_times=(0.5, 1.0), models=("A2",))
    assert np.array_equal(a, forecast_rng(moved, 2, 1.0, Variant.A2).generator.random(3))
    assert not np.array_equal(replication_rng(plan, 0).generator.random(3),
                              replication_rng(plan, 1).generator.random(3))


def test_replication_deterministic():
    plan = small_plan(n_replications=1)
    assert run_replication(plan, 0) == run_replication(plan, 0)
    assert run_study(plan).to_json() == run_study(plan).to_json()


def test_report_shape(report):
    assert report.n_ok == 3 and not report.failures
    assert {(r["model"], r["t1"]) for r in report.durations} == {(m, t) for m in ("A1", "A2") for t in (1.0, 2.0)}
    assert report.estimate("A1", 1.0, "r")["n"] == 3
    assert {r["parameter"] for r in report.estimates if r["model"] == "A2"} >= {"psi1", "psi2", "psi_ratio"}
    jsonschema.validate(json.loads(report.to_json()), load_schema("study_report"))


def test_figure_data(report):
    rows = export_figure_data(report.records, "duration-dist")
    for q in ("forecast_mean", "forecast_median", "forecast_lower", "forecast_upper", "observed_duration"):
        assert sum(r[3] == q for r in rows) == 3 * 2 * 2
    obs = [r[4] for r in rows if r[3] == "observed_duration"]
    assert np.mean(obs) == pytest.approx(report.observed_mean)
    fm = [r[4] for r in rows if r[3] == "forecast_mean" and r[2] == "A1" and r[1] == 2.0]
    assert np.mean(fm) == pytest.approx(report.duration("A1", 2.0)["mean"])
    params = export_figure_data(report.records, "param-dist")
    alpha = [r[4] for r in params if r[3] == "alpha" and r[2] == "A1" and r[1] == 1.0]
    assert len(alpha) == 3 and np.mean(alpha) == pytest.approx(report.estimate("A1", 1.0, "alpha")["mean"])
    with pytest.raises(ValueError):
        export_figure_data(report.records, "bogus")


def test_duration_metrics(report):
    for row in report.durations:
        obs = np.array([r["observed"] for r in report.records])
        est = np.array([c["forecast"]["mean"] for r in report.records for c in r["cells"]
                        if c["model"] == row["model"] and c["t1"] == row["t1"]])
        assert row["pct_bias"] == pytest.approx(100 * np.mean(np.abs(est - obs) / obs))
        assert 0 <= row["coverage"] <= 1


def test_shared_trial_across_models(report):
    for rec in report.records:
        a = {c["t1"]: c["estimates"] for c in rec["cells"] if c["model"] == "A1"}
        b = {c["t1"]: c["estimates"] for c in rec["cells"] if c["model"] == "A2"}
        for t1 in a:
            assert a[t1]["alpha"] == b[t1]["alpha"] and a[t1]["mu"] == b[t1]["mu"]


def test_interim_after_completion():
    plan = small_plan(n_replications=1, interim_times=(1.0, 50.0), config=part1_config(target=40))
    rec = run_replication(plan, 0)
    late = [c for c in rec["cells"] if c["t1"] == 50.0]
    assert all(c["completed_before_interim"] and c["forecast"]["mean"] == rec["observed"] for c in late)


def test_plan_round_trip():
    for plan in (part1_plan(), part2_plan(), small_plan()):
        assert parse_config(plan_to_dict(plan)).plan == plan


def test_write_outputs(tmp_path, report):
    plan = small_plan()
    report.write(tmp_path, manifest(plan, 1.0, 1))
    for name in ("table2.csv", "table3.csv", "report.json", "manifest.json", "figures/param-dist.csv",
                 "figures/duration-dist.csv"):
        assert (tmp_path / name).exists()
    assert not (tmp_path / "table4.csv").exists()
    jsonschema.validate(json.loads((tmp_path / "manifest.json").read_text()), load_schema("study_manifest"))
    head = (tmp_path / "table3.csv").read_text().splitlines()[0]
    assert head == "model,t1,mean,sd,pct_bias,coverage,median,pct_bias_of_means,n"


def test_plan_is_hashable_value():
    assert small_plan() == small_plan()
    assert isinstance(StudyPlan(config=part1_config(), interim_times=[1, 2], models=["A1"]).interim_times, tuple)
