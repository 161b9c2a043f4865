import pytest

from motorwaympc.models.common import VehicleClass, VehicleSnapshot, VehicleState
from motorwaympc.models.config import ScenarioConfig


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run the acceptance-scale simulations marked slow",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def scenario():
    """Default scenario."""
    return ScenarioConfig()


@pytest.fixture
def make_vehicle():
    """Factory for vehicle snapshots."""

    def _make(
        vehicle_id=0,
        x=0.0,
        y=1.5,
        v_x=30.0,
        v_y=0.0,
        a_x=0.0,
        vehicle_class=VehicleClass.AUTOMATED_NON_CONNECTED,
        desired_speed=30.0,
        time_gap=1.2,
        length=4.5,
    ):
        return VehicleSnapshot(
            vehicle_id=vehicle_id,
            vehicle_class=vehicle_class,
            length=length,
            time_gap=time_gap,
            desired_speed=desired_speed,
            state=VehicleState(x=x, y=y, v_x=v_x, v_y=v_y, a_x=a_x),
        )

    return _make
