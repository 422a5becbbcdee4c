import pytest

from lesionmine.errors import ConfigError
from lesionmine.policy import (
    SEMI_VARIABLE,
    STATIC,
    VARIABLE,
    ThresholdPolicy,
    builtin_policies,
    parse_policy,
    policy_to_config,
    threshold_for_round,
)


def test_builtin_schedules():
    got = {p.name: list(p.thresholds) for p in builtin_policies()}
    assert got == {
        "static": [0.90, 0.90, 0.90, 0.90],
        "semi_variable": [0.90, 0.90, 0.85, 0.85],
        "variable": [0.90, 0.85, 0.80, 0.75],
    }


def test_threshold_for_round_examples():
    assert threshold_for_round(VARIABLE, 1) == 0.90
    assert threshold_for_round(VARIABLE, 4) == 0.75
    assert {threshold_for_round(STATIC, k) for k in range(1, 5)} == {0.90}
    assert threshold_for_round(SEMI_VARIABLE, 3) == 0.85


@pytest.mark.parametrize("k", [0, 5, -1])
def test_round_out_of_range(k):
    with pytest.raises(ConfigError):
        threshold_for_round(VARIABLE, k)


def test_builtins_are_non_increasing():
    for p in builtin_policies():
        assert list(p.thresholds) == sorted(p.thresholds, reverse=True)


def test_parse_policy_forms():
    assert parse_policy("variable") is VARIABLE
    assert parse_policy("Semi-Variable") is SEMI_VARIABLE
    custom = parse_policy([95, 90, 85])
    assert custom.thresholds == (0.95, 0.90, 0.85)
    assert custom.rounds == 3
    assert parse_policy("0.9,0.8").thresholds == (0.9, 0.8)
    assert parse_policy([0.7]).thresholds == (0.7,)


@pytest.mark.parametrize("bad", ["aggressive", [], [0.0], [120], ["x"]])
def test_parse_policy_rejects(bad):
    with pytest.raises(ConfigError):
        parse_policy(bad)


def test_config_round_trip():
    for p in builtin_policies():
        assert parse_policy(policy_to_config(p)) == p
    custom = ThresholdPolicy("custom", (0.95, 0.8))
    assert policy_to_config(custom) == [95.0, 80.0]
    assert parse_policy(policy_to_config(custom)) == custom
