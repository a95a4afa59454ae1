import pytest

from pgrecruit.config import DEFAULTS, bundled_plans, dumps, load, loads, parse_config, plan_to_document
from pgrecruit.kernel import GammaParams
from pgrecruit.study import ForecastSettings, part1_plan, part2_plan
from pgrecruit.trial import A2, B3, ConfigError, Variant, part1_config


def test_defaults():
    cfg = parse_config(None)
    assert cfg.trial == part1_config()
    assert cfg.seed == 0
    assert cfg.plan.models == (Variant.A1, Variant.A2)
    assert loads("").plan == cfg.plan


def test_bundled_plans():
    assert bundled_plans() == ["part1.plan", "part2.plan"]
    p1, p2 = load("part1"), load("part2.plan")
    assert p1.plan == part1_plan(forecast=ForecastSettings(n_paths=2000))
    assert p2.plan == part2_plan(forecast=ForecastSettings(n_paths=2000))
    assert isinstance(p2.trial.dropout, B3) and p2.trial.screening_window == 0.2
    assert p1.seed == 7


def test_round_trip():
    for plan in (part1_plan(), part2_plan(n_replications=10, interim_times=(0.5, 4.0))):
        doc = plan_to_document(plan, seed=3)
        again = loads(dumps(doc))
        assert again.plan == plan and again.seed == 3


def test_partial_override():
    cfg = loads("trial:\n  n_centres: 10\n  recruitment: {shape: 2, rate: 0.5}\nstudy:\n  models: [A2]\n")
    assert cfg.trial.n_centres == 10
    assert cfg.trial.recruitment == GammaParams(2.0, 0.5)
    assert cfg.trial.target == DEFAULTS["trial"]["target"]
    assert isinstance(cfg.trial.dropout, A2)
    assert cfg.plan.models == (Variant.A2,)
    assert cfg.raw == {"trial": {"n_centres": 10, "recruitment": {"shape": 2, "rate": 0.5}},
                       "study": {"models": ["A2"]}}


@pytest.mark.parametrize("text,field", [
    ("bogus: 1", "bogus"),
    ("trial: {n_center: 3}", "trial.n_center"),
    ("trial: {n_centres: 0}", "trial.n_centres"),
    ("trial: {n_centres: 2.5}", "trial.n_centres"),
    ("trial: {recruitment: {shape: 1, mean: 2, rate: 1}}", "trial.recruitment"),
    ("trial: {recruitment: {shape: 1, scale: 2}}", "trial.recruitment.scale"),
    ("trial: {dropout: {model: A1}}", "trial.dropout.r"),
    ("trial: {dropout: {model: A1, r: 0.8, theta: 1}}", "trial.dropout.theta"),
    ("trial: {dropout: {model: Z9}}", "trial.dropout.model"),
    ("trial: {dropout: {model: A1, r: 1.5}}", "trial.dropout.r"),
    ("trial: {dropout: {model: B1, r: 0.8, theta: 1}}", "trial.screening_window"),
    ("study: {models: [A1, Q]}", "study.models"),
    ("study: {interim_times: 1}", "study.interim_times"),
    ("forecast: {paths: 0}", "forecast.paths"),
    ("forecast: {delta: 2}", "forecast.delta"),
    ("seed: x", "seed"),
    ("[1, 2]", "<root>"),
    ("trial: [", "<document>"),
])
def test_errors_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        loads(text)
    assert info.value.field == field


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "nope.yaml")
    with pytest.raises(ConfigError):
        load("part9")
    path = tmp_path / "c.yaml"
    path.write_text("seed: 11\n")
    assert load(path).seed == 11
