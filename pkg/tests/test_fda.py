import numpy as np
import pytest

from motorwaympc.cost import CostContext, ObstacleEllipse, total_cost
from motorwaympc.dp_init import DPProblem, lift_to_continuous
from motorwaympc.exceptions import LineSearchError, NonFiniteCostError
from motorwaympc.fda import line_search, project_controls, projected_gradient, solve
from motorwaympc.models.common import (
    ControlTrajectory,
    ObstaclePrediction,
    PredictionSource,
    VehicleState,
)
from motorwaympc.models.config import (
    ControlBounds,
    DPConfig,
    DrivingGoals,
    RoadGeometry,
    SolverConfig,
    Weights,
)

DT = 0.25
BOUNDS = ControlBounds()


def test_project_controls_clamps_to_bounds():
    lower = BOUNDS.lower(2)
    upper = BOUNDS.upper(2)
    u = np.array([[5.0, -2.0], [-1.0, 0.5]])
    projected = project_controls(u, lower, upper)
    np.testing.assert_array_equal(projected, [[4.0, -1.5], [-1.0, 0.5]])
    np.testing.assert_array_equal(
        project_controls(projected, lower, upper),
        projected,
        err_msg="Projection must be idempotent.",
    )


def test_projected_gradient_zeroes_blocked_components():
    lower = BOUNDS.lower(1)
    upper = BOUNDS.upper(1)
    u = np.array([[-4.0, 1.5]])
    gradient = np.array([[2.0, -3.0]])
    np.testing.assert_array_equal(projected_gradient(u, gradient, lower, upper), [[0.0, 0.0]])
    # moving inward is allowed
    np.testing.assert_array_equal(
        projected_gradient(u, -gradient, lower, upper), [[-2.0, 3.0]]
    )


def test_line_search_on_quadratic():
    u = np.ones((4, 2))
    gradient = 2 * u
    direction = -gradient
    cost = float(np.sum(u * u))
    step = line_search(
        lambda v: float(np.sum(v * v)),
        u,
        direction,
        cost,
        float(np.sum(gradient * direction)),
        SolverConfig(),
    )
    assert 0 < step.alpha <= 1, "Step length must lie in (0, 1]."
    assert step.cost < cost, "Accepted step must decrease the objective."
    assert step.alpha == pytest.approx(0.5)
    assert step.cost == pytest.approx(0.0)


def test_line_search_rejects_ascent_direction():
    u = np.ones((2, 2))
    with pytest.raises(LineSearchError, match="descent direction"):
        line_search(lambda v: float(np.sum(v * v)), u, u, 4.0, 8.0, SolverConfig())


def test_line_search_gives_up_without_decrease():
    u = np.ones((2, 2))
    with pytest.raises(LineSearchError, match="Step length"):
        line_search(lambda v: float("inf"), u, -u, 4.0, -8.0, SolverConfig(min_step=1e-3))


@pytest.fixture
def free_road():
    return CostContext(
        obstacles=(),
        goals=DrivingGoals(v_dx=30.0),
        weights=Weights(),
        geometry=RoadGeometry(),
    )


def test_solve_free_road_speeds_up(free_road):
    s0 = VehicleState(0.0, 1.5, 20.0, 0.0, 0.0)
    u0 = ControlTrajectory.zeros(32, DT)
    result = solve(s0, u0, free_road, SolverConfig())

    history = result.cost_history
    assert all(b <= a for a, b in zip(history, history[1:])), "Cost must never increase."
    assert result.cost < total_cost(s0, u0, free_road).total
    assert result.states[-1, 2] > 20.0, "The vehicle should accelerate toward v_dx."
    assert np.all(result.controls.values >= free_road.lower(32))
    assert np.all(result.controls.values <= free_road.upper(32))
    assert result.iterations == len(history) - 1


def test_solve_keeps_lateral_motion_when_symmetric(free_road):
    s0 = VehicleState(0.0, 1.5, 25.0, 0.0, 0.0)
    result = solve(s0, ControlTrajectory.zeros(16, DT), free_road, SolverConfig())
    np.testing.assert_array_equal(result.controls.values[:, 1], np.zeros(16))


def test_solve_projects_infeasible_start(free_road):
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    u0 = ControlTrajectory(np.full((8, 2), 10.0), DT)
    result = solve(s0, u0, free_road, SolverConfig(max_iterations=3))
    assert np.all(result.controls.values[:, 0] <= BOUNDS.j_max)
    assert np.all(result.controls.values[:, 1] <= BOUNDS.a_y_max)


def test_solve_rejects_non_finite_start(free_road):
    s0 = VehicleState(0.0, 1.5, float("nan"), 0.0, 0.0)
    with pytest.raises(NonFiniteCostError):
        solve(s0, ControlTrajectory.zeros(8, DT), free_road, SolverConfig())


def test_dp_seed_escapes_local_minimum():
    horizon = 32
    geometry = RoadGeometry()
    weights = Weights()
    goals = DrivingGoals(v_dx=30.0)
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    steps = np.arange(horizon + 1) * DT
    leader = ObstaclePrediction(
        vehicle_id=1,
        states=np.column_stack(
            (60.0 + 20.0 * steps, np.full(horizon + 1, 1.5), np.full(horizon + 1, 20.0))
        ),
        source=PredictionSource.EXTRAPOLATED,
        length=4.5,
    )
    ctx = CostContext(
        obstacles=(ObstacleEllipse.from_prediction(leader, 4.5, 1.2, geometry, weights),),
        goals=goals,
        weights=weights,
        geometry=geometry,
    )

    in_lane = solve(s0, ControlTrajectory.zeros(horizon, DT), ctx, SolverConfig())
    assert np.max(np.abs(in_lane.states[:, 1] - 1.5)) == 0.0, "Zero start has no lateral pull."

    dp_cfg = DPConfig()
    coarse = DPProblem(s0, [leader], goals, dp_cfg, geometry).solve_forward_bnb()
    assert coarse.lane_change_step is not None, "The coarse plan should overtake."
    guess = lift_to_continuous(coarse, s0, DT, horizon, dp_cfg, geometry)
    seeded = solve(s0, guess, ctx, SolverConfig())

    assert seeded.cost < in_lane.cost, (
        f"DP seed should reach a lower cost ({seeded.cost:.3f} vs {in_lane.cost:.3f})."
    )
    assert np.max(seeded.states[:, 1]) > geometry.lane_width, "Seeded path should change lane."
