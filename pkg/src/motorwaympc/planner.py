"""
planner.py

Model predictive control of one automated vehicle.

Each planning call selects the obstacles inside the planning zone, predicts
their paths over the horizon, seeds the solver with the lifted coarse DP plan
and checks the optimized path. An unsafe path is replaced by a safety
override plan (reduced desired speed and horizon); if that fails too, the
caller falls back to braking in lane.

Plans are applied open loop until one of the replan triggers fires: half of
the horizon has elapsed, an obstacle deviates from its prediction, a new
obstacle enters the zone or the vehicle could not track its plan.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from motorwaympc.cost import (
	CostContext,
	ObstacleEllipse,
	collision_penalty,
	total_cost,
)
from motorwaympc.dp_init import (
	DPPlan,
	DPProblem,
	lift_to_continuous,
)
from motorwaympc.exceptions import (
	NoFeasiblePlanError,
	NonFiniteCostError,
	PlanningFailureError,
)
from motorwaympc.fda import SolveResult, solve
from motorwaympc.kinematics import rollout_array
from motorwaympc.logging_config import logger as log
from motorwaympc.models.common import (
	ControlTrajectory,
	ObstaclePrediction,
	Plan,
	PlanDiagnostics,
	PlanMode,
	PredictionSource,
	ReplanTrigger,
	VehicleSnapshot,
	VehicleState,
	WorldSnapshot,
	lane_of,
	lanes_touched,
)
from motorwaympc.models.config import (
	ControlBounds,
	DrivingGoals,
	PlannerParams,
	ScenarioConfig,
)


def _now_us() -> int:
	return time.perf_counter_ns() // 1000


def select_obstacles(
	ego: VehicleSnapshot, world: WorldSnapshot, params: PlannerParams
) -> List[int]:
	"""
	Ids of the vehicles inside the planning zone of ``ego``, sorted.

	The zone spans ``zone_ahead * v_d * K * T`` ahead of the ego and
	``zone_behind * v_d * K * T`` behind it, in every lane, boundaries included.
	"""
	reach = ego.desired_speed * params.horizon_time
	x = ego.state.x
	return sorted(
		v.vehicle_id
		for v in world.within(x - params.zone_behind * reach, x + params.zone_ahead * reach)
		if v.vehicle_id != ego.vehicle_id
	)


def _extrapolate(
	vehicle: VehicleSnapshot, horizon: int, dt: float
) -> ObstaclePrediction:
	steps = np.arange(horizon + 1) * dt
	s = vehicle.state
	states = np.column_stack(
		(
			s.x + s.v_x * steps,
			np.full(horizon + 1, s.y),
			np.full(horizon + 1, s.v_x),
		)
	)
	return ObstaclePrediction(
		vehicle_id=vehicle.vehicle_id,
		states=states,
		source=PredictionSource.EXTRAPOLATED,
		length=vehicle.length,
		vehicle_class=vehicle.vehicle_class,
	)


def _from_broadcast(
	vehicle: VehicleSnapshot, plan: Plan, now: float, horizon: int, dt: float
) -> ObstaclePrediction:
	"""Shift a broadcast plan to the ego clock and extend it at terminal speed and lane."""
	rows = np.empty((horizon + 1, 3))
	last = plan.states.shape[0] - 1
	x_end, y_end, v_end = plan.states[last, 0], plan.states[last, 1], plan.states[last, 2]
	for k in range(horizon + 1):
		t = now + k * dt
		m = plan.step_index(t)
		if m <= last:
			m = max(m, 0)
			rows[k] = plan.states[m, 0], plan.states[m, 1], plan.states[m, 2]
		else:
			beyond = t - (plan.created_at + last * plan.dt)
			rows[k] = x_end + v_end * beyond, y_end, v_end
	return ObstaclePrediction(
		vehicle_id=vehicle.vehicle_id,
		states=rows,
		source=PredictionSource.BROADCAST,
		length=vehicle.length,
		vehicle_class=vehicle.vehicle_class,
	)


def predict_obstacles(
	ego: VehicleSnapshot,
	obstacle_ids: Sequence[int],
	world: WorldSnapshot,
	params: PlannerParams,
	horizon: Optional[int] = None,
) -> List[ObstaclePrediction]:
	"""
	Predict the obstacles' ``(x, y, v_x)`` over the ego horizon.

	Connected egos use the latest broadcast plan of connected obstacles;
	everything else is extrapolated at constant speed in its current lane.
	"""
	horizon = horizon if horizon is not None else params.horizon
	predictions = []
	for vid in obstacle_ids:
		vehicle = world[vid]
		plan = world.broadcasts.get(vid)
		if (
			ego.vehicle_class.is_connected
			and vehicle.vehicle_class.is_connected
			and plan is not None
		):
			predictions.append(
				_from_broadcast(vehicle, plan, world.clock, horizon, params.step)
			)
		else:
			predictions.append(_extrapolate(vehicle, horizon, params.step))
	return predictions


def _leader(
	ego: VehicleSnapshot,
	predictions: Sequence[ObstaclePrediction],
	n_lanes: int,
	lane_width: float,
) -> Optional[ObstaclePrediction]:
	"""Closest obstacle ahead that occupies the ego lane at planning time."""
	lane = lane_of(ego.state.y, lane_width, n_lanes)
	ahead = [
		p
		for p in predictions
		if p.states[0, 0] > ego.state.x
		and lane in lanes_touched(float(p.states[0, 1]), lane_width, n_lanes)
	]
	return min(ahead, key=lambda p: (p.states[0, 0], p.vehicle_id), default=None)


def lane_keeping_profile(
	state: VehicleState,
	horizon: int,
	dt: float,
	lane_width: float,
	n_lanes: int,
	bounds: ControlBounds,
) -> np.ndarray:
	"""
	Lateral accelerations that bring ``state`` to its lane centre and hold it.

	Zero for a vehicle already centred with no lateral speed.
	"""
	center = (lane_of(state.y, lane_width, n_lanes) + 0.5) * lane_width
	y, v_y = state.y, state.v_y
	profile = np.zeros(horizon)
	for k in range(horizon):
		a_y = float(np.clip((center - y) - 2.0 * v_y, bounds.a_y_min, bounds.a_y_max))
		profile[k] = a_y
		y += v_y * dt + 0.5 * a_y * dt * dt
		v_y += a_y * dt
	return profile


@dataclass(frozen=True, eq=False)
class _Attempt:
	result: SolveResult
	dp_plan: Optional[DPPlan]
	timings_us: Dict[str, int]
	initial_cost: float


class PathPlanner:
	"""
	Plans for automated vehicles of one scenario.

	The planner holds only configuration, so a single instance may serve many
	vehicles and threads.

	Parameters
	----------
	config : ScenarioConfig
	    Scenario whose planner, weights, solver, DP, bounds and road sections
	    are used.
	"""

	def __init__(self, config: ScenarioConfig) -> None:
		self.config = config
		self.params = config.planner

	# ------------------------------------------------------------------
	# building blocks

	def _context(
		self,
		ego: VehicleSnapshot,
		predictions: Sequence[ObstaclePrediction],
		goals: DrivingGoals,
		fixed_lateral: Optional[np.ndarray] = None,
	) -> CostContext:
		cfg = self.config
		return CostContext(
			obstacles=tuple(
				ObstacleEllipse.from_prediction(
					p, ego.length, ego.time_gap, cfg.road, cfg.weights
				)
				for p in predictions
			),
			goals=goals,
			weights=cfg.weights,
			geometry=cfg.road,
			bounds=cfg.bounds,
			fixed_lateral=fixed_lateral,
		)

	def _coarse_plan(
		self,
		ego: VehicleSnapshot,
		predictions: Sequence[ObstaclePrediction],
		goals: DrivingGoals,
		horizon_steps: int,
		timings: Dict[str, int],
		lane_changes: bool = True,
	) -> DPPlan:
		cfg = self.config
		dp_cfg = cfg.dp if lane_changes else dataclasses.replace(cfg.dp, lat_set=(0,))
		problem = DPProblem(
			ego.state,
			predictions,
			goals,
			dp_cfg,
			cfg.road,
			ego_length=ego.length,
			omega=ego.time_gap,
			fine_step=self.params.step,
			horizon_steps=horizon_steps,
		)
		method = self.params.dp_method
		forward: Optional[DPPlan] = None
		if method in ('forward', 'both'):
			start = _now_us()
			try:
				forward = problem.solve_forward_bnb()
			finally:
				timings['bnb'] = _now_us() - start
			if method == 'forward':
				return forward
			# fresh memo so the backward timing is not flattered
			problem = DPProblem(
				ego.state,
				predictions,
				goals,
				dp_cfg,
				cfg.road,
				ego_length=ego.length,
				omega=ego.time_gap,
				fine_step=self.params.step,
				horizon_steps=horizon_steps,
			)
		start = _now_us()
		try:
			return problem.solve_backward()
		finally:
			timings['dp'] = _now_us() - start

	def _attempt(
		self,
		ego: VehicleSnapshot,
		predictions: Sequence[ObstaclePrediction],
		goals: DrivingGoals,
		horizon: int,
		lane_changes: bool = True,
		fixed_lateral: Optional[np.ndarray] = None,
	) -> _Attempt:
		"""Coarse plan, lift and optimize over ``horizon`` fine steps."""
		cfg = self.config
		timings: Dict[str, int] = {}
		dp_horizon = max(1, int(round(horizon * self.params.step / cfg.dp.step)))
		dp_plan: Optional[DPPlan]
		try:
			dp_plan = self._coarse_plan(
				ego, predictions, goals, dp_horizon, timings, lane_changes
			)
			guess = lift_to_continuous(
				dp_plan, ego.state, self.params.step, horizon, cfg.dp, cfg.road, cfg.bounds
			)
		except NoFeasiblePlanError:
			log.warning(
				'[bold magenta]vehicle %d:[/] coarse problem infeasible, seeding with braking',
				ego.vehicle_id,
			)
			dp_plan = None
			guess = braking_controls(
				ego.state, horizon, self.params.step, cfg.bounds, abs(min(cfg.dp.accel_set))
			)

		if fixed_lateral is not None:
			values = np.array(guess.values)
			values[:, 1] = fixed_lateral[:horizon]
			guess = ControlTrajectory(values, guess.dt)

		ctx = self._context(ego, predictions, goals, fixed_lateral)
		start = _now_us()
		initial_cost = total_cost(ego.state, guess, ctx).total
		result = solve(ego.state, guess, ctx, cfg.solver)
		timings['fda'] = _now_us() - start
		return _Attempt(result, dp_plan, timings, initial_cost)

	def _make_plan(
		self,
		ego: VehicleSnapshot,
		attempt: _Attempt,
		predictions: Sequence[ObstaclePrediction],
		goals: DrivingGoals,
		now: float,
		plan_id: int,
		trigger: ReplanTrigger,
		mode: PlanMode,
	) -> Plan:
		result = attempt.result
		horizon = result.controls.horizon
		timings = dict(attempt.timings_us)
		timings['total'] = sum(timings.values())
		return Plan(
			plan_id=plan_id,
			vehicle_id=ego.vehicle_id,
			controls=result.controls,
			states=result.states,
			cost=result.breakdown,
			created_at=now,
			valid_until=now + horizon * result.controls.dt / 2.0,
			mode=mode,
			desired_speed=goals.v_dx,
			trigger=trigger,
			predictions=tuple(p for p in predictions),
			diagnostics=PlanDiagnostics(
				dp_cost=attempt.dp_plan.cost if attempt.dp_plan else None,
				fda_cost=result.cost,
				initial_cost=attempt.initial_cost,
				iterations=result.iterations,
				converged=result.converged,
				dp_feasible=attempt.dp_plan is not None,
				dp_expansions=attempt.dp_plan.expansions if attempt.dp_plan else 0,
				timings_us=timings,
			),
		)

	# ------------------------------------------------------------------
	# operations

	def check_safety(
		self,
		ego: VehicleSnapshot,
		states: np.ndarray,
		predictions: Sequence[ObstaclePrediction],
	) -> bool:
		"""
		Whether a planned path is safe.

		A path is unsafe if, at any step including the first and for any
		obstacle, the collision penalty exceeds the safety threshold (the ego
		is inside the core of the obstacle ellipse) or the vehicle rectangles
		(length by lane width) overlap.
		"""
		cfg = self.config
		width = cfg.road.lane_width
		threshold = self.params.safety_threshold
		horizon = states.shape[0] - 1
		for pred in predictions:
			ellipse = ObstacleEllipse.from_prediction(
				pred, ego.length, ego.time_gap, cfg.road, cfg.weights
			)
			half_lengths = 0.5 * (ego.length + pred.length)
			for k in range(min(horizon, pred.states.shape[0] - 1) + 1):
				x, y, v_x = states[k, 0], states[k, 1], states[k, 2]
				x_i, y_i = pred.states[k, 0], pred.states[k, 1]
				if abs(x - x_i) < half_lengths and abs(y - y_i) < width:
					return False
				if collision_penalty(x, y, v_x, ellipse, k) > threshold:
					return False
		return True

	def plan(
		self,
		ego: VehicleSnapshot,
		predictions: Sequence[ObstaclePrediction],
		goals: Optional[DrivingGoals] = None,
		now: float = 0.0,
		plan_id: int = 0,
		trigger: ReplanTrigger = ReplanTrigger.INITIAL,
	) -> Plan:
		"""
		Plan for ``ego`` given obstacle predictions.

		Parameters
		----------
		ego : VehicleSnapshot
		    The vehicle to plan for.
		predictions : Sequence[ObstaclePrediction]
		    Predicted obstacle paths covering the full horizon.
		goals : DrivingGoals, optional
		    Desired speeds; defaults to the vehicle's own desired speed.
		now : float
		    Simulation time of ``ego.state``.
		plan_id : int
		    Identifier of the new plan.
		trigger : ReplanTrigger
		    Why the plan is made.

		Returns
		-------
		Plan
		    A normal plan, or a safety override plan if the normal path is unsafe.

		Raises
		------
		PlanningFailureError
		    If the safety override also fails.
		"""
		if not ego.state.is_finite():
			msg = f'Vehicle {ego.vehicle_id} has a non-finite state {ego.state}.'
			raise PlanningFailureError(msg)
		goals = goals or DrivingGoals(v_dx=ego.desired_speed)
		try:
			attempt = self._attempt(ego, predictions, goals, self.params.horizon)
		except NonFiniteCostError as nfe:
			log.warning('[bold magenta]vehicle %d:[/] %s', ego.vehicle_id, nfe)
			attempt = None

		if attempt is not None and self.check_safety(
			ego, attempt.result.states, predictions
		):
			log.debug(
				'[bold magenta]vehicle %d:[/] plan %d (%s) J=%.3f after %d iterations',
				ego.vehicle_id,
				plan_id,
				trigger.value,
				attempt.result.cost,
				attempt.result.iterations,
			)
			return self._make_plan(
				ego, attempt, predictions, goals, now, plan_id, trigger, PlanMode.NORMAL
			)

		log.warning(
			'[bold magenta]vehicle %d:[/] unsafe path at t=%.2f, applying safety override',
			ego.vehicle_id,
			now,
		)
		return self.safety_override(ego, predictions, goals, now, plan_id, trigger)

	def safety_override(
		self,
		ego: VehicleSnapshot,
		predictions: Sequence[ObstaclePrediction],
		goals: Optional[DrivingGoals] = None,
		now: float = 0.0,
		plan_id: int = 0,
		trigger: ReplanTrigger = ReplanTrigger.INITIAL,
	) -> Plan:
		"""
		Re-plan with a reduced horizon behind the leader.

		With a leader in the ego lane the desired speed becomes a fraction of
		the leader's current speed. Without one the vehicle keeps its desired
		speed and its lateral accelerations are held at zero.

		Raises
		------
		PlanningFailureError
		    If the override path is unsafe or cannot be computed.
		"""
		cfg = self.config
		goals = goals or DrivingGoals(v_dx=ego.desired_speed)
		horizon = self.params.override_horizon
		leader = _leader(ego, predictions, cfg.road.n_lanes, cfg.road.lane_width)
		try:
			if leader is not None:
				v_leader = max(0.0, float(leader.states[0, 2]))
				goals = DrivingGoals(
					v_dx=min(goals.v_dx, self.params.override_speed_factor * v_leader),
					v_dy=goals.v_dy,
				)
				attempt = self._attempt(ego, predictions, goals, horizon)
			else:
				attempt = self._attempt(
					ego,
					predictions,
					goals,
					horizon,
					lane_changes=False,
					fixed_lateral=np.zeros(horizon),
				)
		except NonFiniteCostError as nfe:
			msg = f'Safety override for vehicle {ego.vehicle_id} failed: {nfe}'
			raise PlanningFailureError(msg) from nfe

		if not self.check_safety(ego, attempt.result.states, predictions):
			msg = (
				f'Safety override for vehicle {ego.vehicle_id} at t={now:.2f} '
				'still produces an unsafe path.'
			)
			raise PlanningFailureError(msg)
		return self._make_plan(
			ego, attempt, predictions, goals, now, plan_id, trigger, PlanMode.OVERRIDE
		)

	def braking_plan(
		self,
		ego: VehicleSnapshot,
		predictions: Sequence[ObstaclePrediction],
		now: float = 0.0,
		plan_id: int = 0,
		trigger: ReplanTrigger = ReplanTrigger.INITIAL,
	) -> Plan:
		"""Comfortable in-lane braking, used when planning fails."""
		cfg = self.config
		horizon = self.params.horizon
		dt = self.params.step
		braking = braking_controls(
			ego.state, horizon, dt, cfg.bounds, abs(min(cfg.dp.accel_set))
		)
		values = np.array(braking.values)
		values[:, 1] = lane_keeping_profile(
			ego.state, horizon, dt, cfg.road.lane_width, cfg.road.n_lanes, cfg.bounds
		)
		controls = ControlTrajectory(values, dt)
		goals = DrivingGoals(v_dx=ego.desired_speed)
		breakdown = total_cost(ego.state, controls, self._context(ego, predictions, goals))
		return Plan(
			plan_id=plan_id,
			vehicle_id=ego.vehicle_id,
			controls=controls,
			states=rollout_array(ego.state.as_array(), values, dt),
			cost=breakdown,
			created_at=now,
			valid_until=now + horizon * dt / 2.0,
			mode=PlanMode.FALLBACK,
			desired_speed=goals.v_dx,
			trigger=trigger,
			predictions=tuple(predictions),
			diagnostics=PlanDiagnostics(fda_cost=breakdown.total, dp_feasible=False),
		)

	def replan(
		self,
		ego: VehicleSnapshot,
		world: WorldSnapshot,
		plan_id: int,
		trigger: ReplanTrigger,
	) -> Tuple[Plan, Optional[PlanningFailureError]]:
		"""
		Select, predict and plan for ``ego`` in ``world``.

		Returns the plan and, when the braking fallback had to be used, the
		planning error that caused it.
		"""
		ids = select_obstacles(ego, world, self.params)
		predictions = predict_obstacles(ego, ids, world, self.params)
		try:
			plan = self.plan(ego, predictions, None, world.clock, plan_id, trigger)
		except PlanningFailureError as pfe:
			log.warning('[bold magenta]vehicle %d:[/] %s', ego.vehicle_id, pfe)
			return self.braking_plan(ego, predictions, world.clock, plan_id, trigger), pfe
		return plan, None

	def needs_replan(
		self,
		ego: VehicleSnapshot,
		plan: Optional[Plan],
		world: WorldSnapshot,
		tracking_failed: bool = False,
	) -> ReplanTrigger:
		"""
		Decide whether ``ego`` must replan at ``world.clock``.

		Triggers are checked in the order: half horizon elapsed, obstacle
		deviation, new obstacle in the zone, tracking failure.
		"""
		if plan is None:
			return ReplanTrigger.INITIAL
		now = world.clock
		if now >= plan.valid_until - 1e-9:
			return ReplanTrigger.HALF_HORIZON

		width = self.config.road.lane_width
		n_lanes = self.config.road.n_lanes
		k = plan.step_index(now)
		for pred in plan.predictions:
			if pred.vehicle_id not in world or k >= pred.states.shape[0]:
				continue
			actual = world[pred.vehicle_id].state
			predicted_v = pred.states[k, 2]
			if abs(actual.v_x - predicted_v) > self.params.replan_speed_threshold:
				return ReplanTrigger.OBSTACLE_DEVIATION
			if lane_of(actual.y, width, n_lanes) != lane_of(pred.states[k, 1], width, n_lanes):
				return ReplanTrigger.OBSTACLE_DEVIATION

		known = plan.obstacle_ids
		if any(vid not in known for vid in select_obstacles(ego, world, self.params)):
			return ReplanTrigger.NEW_OBSTACLE

		if tracking_failed:
			return ReplanTrigger.TRACKING_FAILURE
		return ReplanTrigger.NONE


def braking_controls(
	state: VehicleState,
	horizon: int,
	dt: float,
	bounds: ControlBounds,
	deceleration: float = 3.0,
) -> ControlTrajectory:
	"""
	Jerk profile driving the acceleration to ``-deceleration`` in lane.

	The braking is released early enough for the acceleration to return to
	zero before the vehicle stops; lateral controls are zero.
	"""
	controls = np.zeros((horizon, 2))
	v, a = state.v_x, state.a_x
	for k in range(horizon):
		release = a * a / (2.0 * bounds.j_max) + abs(a) * dt
		target = -deceleration if v > release else 0.0
		j_x = float(np.clip((target - a) / dt, bounds.j_min, bounds.j_max))
		controls[k, 0] = j_x
		v += a * dt + 0.5 * j_x * dt * dt
		a += j_x * dt
	return ControlTrajectory(controls, dt)
