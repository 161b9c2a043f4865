import itertools

import numpy as np
import pytest

from motorwaympc.dp_init import (
    Action,
    DPPlan,
    DPProblem,
    lift_to_continuous,
    solve_backward,
    solve_forward_bnb,
)
from motorwaympc.exceptions import NoFeasiblePlanError
from motorwaympc.kinematics import rollout
from motorwaympc.models.common import ObstaclePrediction, PredictionSource, VehicleState
from motorwaympc.models.config import DPConfig, DrivingGoals, RoadGeometry

DT = 0.25
GEOMETRY = RoadGeometry()


def constant_speed(vehicle_id, x0, y, v, horizon=32):
    steps = np.arange(horizon + 1) * DT
    states = np.column_stack(
        (x0 + v * steps, np.full(horizon + 1, y), np.full(horizon + 1, v))
    )
    return ObstaclePrediction(
        vehicle_id=vehicle_id,
        states=states,
        source=PredictionSource.EXTRAPOLATED,
        length=4.5,
    )


def best_by_enumeration(problem):
    """Cheapest feasible action sequence, found by trying all of them."""
    best = np.inf
    for actions in itertools.product(problem.actions, repeat=problem.horizon):
        states = [problem.initial]
        for action in actions:
            nxt = problem.transition(states[-1], action)
            if nxt is None:
                break
            states.append(nxt)
        else:
            best = min(best, problem.path_cost(states, actions))
    return best


def test_free_road_at_desired_speed():
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    plan = solve_forward_bnb(s0, [], DrivingGoals(v_dx=30.0), DPConfig())
    assert plan.accel_seq == (0.0,) * 8, "No reason to accelerate on a free road."
    assert plan.lane_seq == (0,) * 9, "No reason to change lanes on a free road."
    assert plan.cost == 0.0
    assert plan.lane_change_step is None


def test_accelerates_immediately_below_desired_speed():
    s0 = VehicleState(0.0, 1.5, 27.0, 0.0, 0.0)
    cfg = DPConfig(weights=(1.0, 1.0, 1.0))
    plan = solve_backward(s0, [], DrivingGoals(v_dx=30.0), cfg)
    assert plan.accel_seq[0] == 3.0, "Speed deficit should be closed in the first step."
    assert plan.accel_seq[1:] == (0.0,) * 7
    assert plan.cost == pytest.approx(18.0)


def test_plan_cost_is_recomputed_from_its_path():
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    slow = constant_speed(1, 60.0, 1.5, 15.0)
    goals = DrivingGoals(v_dx=30.0)
    problem = DPProblem(s0, [slow], goals, DPConfig(), GEOMETRY, horizon_steps=8)
    for plan in (problem.solve_backward(), problem.solve_forward_bnb()):
        moves = np.diff(plan.lane_seq)
        actions = [Action(a, int(m)) for a, m in zip(plan.accel_seq, moves, strict=True)]
        states = [problem.initial]
        for action in actions:
            states.append(problem.transition(states[-1], action))
        assert None not in states
        assert len(states) == problem.horizon + 1
        pairs = zip(states[:-1], actions, strict=True)
        expected = sum(problem.stage_cost(s, a) for s, a in pairs)
        assert plan.cost == pytest.approx(expected)
        assert problem.path_cost(states, actions) == pytest.approx(plan.cost)


def test_solvers_match_enumeration():
    rng = np.random.default_rng(5)
    cfg = DPConfig()
    for _ in range(25):
        v = 3.0 * rng.integers(5, 12)
        s0 = VehicleState(0.0, GEOMETRY.lane_center(int(rng.integers(0, 3))), v, 0.0, 0.0)
        obstacles = [
            constant_speed(
                i,
                rng.uniform(-40, 80),
                GEOMETRY.lane_center(int(rng.integers(0, 3))),
                rng.uniform(10, 35),
            )
            for i in range(int(rng.integers(1, 4)))
        ]
        goals = DrivingGoals(v_dx=float(rng.uniform(20, 35)))
        problem = DPProblem(s0, obstacles, goals, cfg, GEOMETRY, horizon_steps=4)
        expected = best_by_enumeration(problem)

        if np.isinf(expected):
            with pytest.raises(NoFeasiblePlanError):
                problem.solve_backward()
            with pytest.raises(NoFeasiblePlanError):
                problem.solve_forward_bnb()
            continue

        backward = problem.solve_backward()
        forward = problem.solve_forward_bnb()
        assert backward.cost == pytest.approx(expected, abs=1e-9)
        assert forward.cost == pytest.approx(expected, abs=1e-9)
        assert len(forward.accel_seq) == 4
        assert len(forward.lane_seq) == 5


def test_forward_search_expands_fewer_states():
    s0 = VehicleState(0.0, 4.5, 30.0, 0.0, 0.0)
    goals = DrivingGoals(v_dx=30.0)
    forward = solve_forward_bnb(s0, [], goals, DPConfig())
    backward = solve_backward(s0, [], goals, DPConfig())
    assert forward.cost == backward.cost
    assert forward.method == "forward"
    assert backward.method == "backward"
    assert forward.expansions < backward.expansions, (
        f"Branch-and-bound expanded {forward.expansions} states, "
        f"backward recursion evaluated {backward.expansions}."
    )


def test_slower_leader_causes_lane_change():
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    leader = constant_speed(1, 60.0, 1.5, 20.0)
    plan = solve_forward_bnb(s0, [leader], DrivingGoals(v_dx=30.0), DPConfig())
    assert plan.lane_change_step is not None, "Overtaking is cheaper than braking."
    assert plan.lane_seq[-1] == 1
    assert plan.cost == pytest.approx(1.0)


def test_lane_changes_limited_per_horizon():
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    leader = constant_speed(1, 60.0, 1.5, 20.0)
    plan = solve_backward(s0, [leader], DrivingGoals(v_dx=30.0), DPConfig())
    changes = sum(a != b for a, b in zip(plan.lane_seq, plan.lane_seq[1:]))
    assert changes <= 1


def test_fully_blocked_road_is_infeasible():
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    wall = [constant_speed(i, 30.0, GEOMETRY.lane_center(i), 0.0) for i in range(3)]
    with pytest.raises(NoFeasiblePlanError):
        solve_forward_bnb(s0, wall, DrivingGoals(v_dx=30.0), DPConfig())
    with pytest.raises(NoFeasiblePlanError):
        solve_backward(s0, wall, DrivingGoals(v_dx=30.0), DPConfig())


def test_lift_acceleration_step():
    s0 = VehicleState(0.0, 1.5, 27.0, 0.0, 0.0)
    plan = DPPlan((3.0,) + (0.0,) * 7, (0,) * 9, 0.0)
    controls = lift_to_continuous(plan, s0, DT, 32, DPConfig(), GEOMETRY)
    jerk = controls.values[:, 0]
    np.testing.assert_allclose(jerk[:3], [4.0, 4.0, 4.0])
    assert jerk[3] == pytest.approx(0.0), "Acceleration reached its target."
    np.testing.assert_array_equal(controls.values[:, 1], np.zeros(32))


def test_lift_lane_change_pulse():
    s0 = VehicleState(0.0, 1.5, 30.0, 0.0, 0.0)
    plan = DPPlan((0.0,) * 8, (0,) + (1,) * 8, 0.0)
    controls = lift_to_continuous(plan, s0, DT, 32, DPConfig(), GEOMETRY)
    a_y = controls.values[:, 1]
    np.testing.assert_allclose(a_y[:6], 4.0 / 3.0)
    np.testing.assert_allclose(a_y[6:12], -4.0 / 3.0)
    np.testing.assert_allclose(a_y[12:], 0.0, atol=1e-12)

    states = rollout(s0, controls)
    assert states[12, 1] - s0.y == pytest.approx(3.0), "Pulse must move exactly one lane."
    assert states[12, 3] == pytest.approx(0.0, abs=1e-12), "Lateral speed must end at zero."
    assert states[-1, 1] == pytest.approx(4.5)
