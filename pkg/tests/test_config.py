import pytest

from motorwaympc.exceptions import ConfigError
from motorwaympc.models.config import (
    DPConfig,
    PlannerParams,
    RoadGeometry,
    ScenarioConfig,
    Weights,
    parse_override,
)


def test_defaults(scenario):
    assert scenario.planner.horizon == 32
    assert scenario.planner.step == 0.25
    assert scenario.planner.override_horizon == 16
    assert scenario.weights == Weights(
        w1=1.5, w2=1.0, w3=1.5, w4=0.05, w5=1.0, w6=15.0, w7=15.0, w8=1.0
    )
    assert scenario.road.width == 9.0
    assert scenario.road.lane_center(1) == 4.5
    assert scenario.spawn.inflow == 3000.0


def test_empty_mapping_is_default_scenario():
    assert ScenarioConfig.from_dict(None) == ScenarioConfig()
    assert ScenarioConfig.from_dict({}) == ScenarioConfig()


def test_yaml_round_trip(tmp_path):
    config = ScenarioConfig().with_overrides({"spawn.inflow": 1800, "seeds": [1, 2]})
    path = tmp_path / "scenario.yaml"
    config.to_yaml(path)
    assert ScenarioConfig.from_yaml(path) == config


def test_empty_file_is_default_scenario(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    assert ScenarioConfig.from_yaml(path) == ScenarioConfig()


def test_unknown_key_is_reported_with_path():
    with pytest.raises(ConfigError, match=r"planner\.horizn"):
        ScenarioConfig.from_dict({"planner": {"horizn": 10}})


def test_wrong_type_is_reported():
    with pytest.raises(ConfigError, match="expected an integer"):
        ScenarioConfig.from_dict({"planner": {"horizon": "long"}})


@pytest.mark.parametrize(
    "factory",
    [
        lambda: PlannerParams(horizon=1),
        lambda: PlannerParams(dp_method="sideways"),
        lambda: RoadGeometry(margin=3.5),
        lambda: DPConfig(lat_set=(-2, 0, 2)),
        lambda: DPConfig(weights=(1.0, 1.0)),
    ],
)
def test_invalid_values_are_rejected(factory):
    with pytest.raises(ConfigError):
        factory()


def test_overrides():
    config = ScenarioConfig().with_overrides({"spawn.penetration": 0.25, "duration": 60})
    assert config.spawn.penetration == 0.25
    assert config.duration == 60.0
    with pytest.raises(ConfigError, match="unknown"):
        ScenarioConfig().with_overrides({"spawn.nope": 1})


@pytest.mark.parametrize(
    "item, expected",
    [
        ("planner.horizon=16", ("planner.horizon", 16)),
        ("spawn.connectivity=non-connected", ("spawn.connectivity", "non-connected")),
        ("seeds=[1, 2, 3]", ("seeds", [1, 2, 3])),
        ("trace=false", ("trace", False)),
    ],
)
def test_parse_override(item, expected):
    assert parse_override(item) == expected


def test_parse_override_needs_equals():
    with pytest.raises(ConfigError):
        parse_override("planner.horizon")


def test_digest_ignores_run_settings():
    base = ScenarioConfig()
    moved = base.with_overrides({"output_dir": "elsewhere", "workers": 4, "seeds": [7]})
    assert base.digest() == moved.digest()
    assert base.digest() != base.with_overrides({"spawn.inflow": 2000}).digest()


def test_coarse_horizon_must_match_planning_horizon():
    with pytest.raises(ConfigError, match=r"dp\.horizon_steps"):
        ScenarioConfig().with_overrides({"planner.horizon": 16})
    config = ScenarioConfig().with_overrides({"planner.horizon": 16, "dp.horizon_steps": 4})
    assert config.planner.horizon_time == 4.0
