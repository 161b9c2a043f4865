"""
dp_init.py

Coarse, lane-based version of the planning problem, solved exactly on a grid
and lifted to a continuous control trajectory that seeds the solver.

The coarse problem uses a large step (1 s), a small set of longitudinal
accelerations and lane moves of -1, 0 or +1 lane, at most one lane change per
horizon. Its cost is

    sum_k  w1 a(k)^2 + w2 u_y(k)^2 + w3 (v(k) - v_d)^2

and transitions that leave the road, hit an obstacle or reverse are dropped.
Two exact solvers are provided: classic backward recursion over the reachable
state set and a forward best-first branch-and-bound that stops as soon as a
full-horizon state is the cheapest open state.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from motorwaympc.exceptions import NoFeasiblePlanError
from motorwaympc.logging_config import logger as log
from motorwaympc.models.common import (
	ControlTrajectory,
	ObstaclePrediction,
	VehicleState,
	lane_of,
	lanes_touched,
)
from motorwaympc.models.config import (
	ControlBounds,
	DPConfig,
	DrivingGoals,
	RoadGeometry,
)


class DPState(NamedTuple):
	"""Grid state: step, position index, speed index, lane, lane changes used."""

	k: int
	x_idx: int
	v_idx: int
	lane: int
	lc_used: int


class Action(NamedTuple):
	accel: float
	lane_move: int


@dataclass(frozen=True)
class DPPlan:
	"""
	Optimal coarse plan.

	Attributes
	----------
	accel_seq : tuple of float
	    Acceleration of each coarse step, length ``K_dp``.
	lane_seq : tuple of int
	    Lane at each coarse time, length ``K_dp + 1``.
	cost : float
	    Coarse objective, summed along the path in step order.
	expansions : int
	    States expanded (branch-and-bound) or evaluated (backward recursion).
	method : str
	    ``forward`` or ``backward``.
	"""

	accel_seq: Tuple[float, ...]
	lane_seq: Tuple[int, ...]
	cost: float
	expansions: int = 0
	method: str = 'backward'

	@property
	def lane_change_step(self) -> Optional[int]:
		"""Coarse step at which the lane changes, or None."""
		for k in range(len(self.accel_seq)):
			if self.lane_seq[k + 1] != self.lane_seq[k]:
				return k
		return None


@dataclass(frozen=True)
class _Blocker:
	"""
	Obstacle box at one half-step.

	The ego is blocked when ``x_e + omega * v_e > rear`` and ``x_e < front``.
	"""

	rear: float
	front: float


class DPProblem:
	"""
	Grid, transition and cost model of the coarse problem.

	Positions are relative to the ego vehicle, so the initial state is always
	at ``x_idx = 0``; the initial speed is snapped to the nearest grid speed.

	Parameters
	----------
	s0 : VehicleState
	    Ego state at planning time.
	obstacles : Sequence[ObstaclePrediction]
	    Obstacle predictions on the fine time grid.
	goals : DrivingGoals
	    Desired speed of the ego vehicle.
	cfg : DPConfig
	    Grid, action sets and weights.
	geometry : RoadGeometry
	    Lane layout.
	ego_length : float
	    Ego length (m).
	omega : float
	    Ego time gap (s).
	fine_step : float
	    Step of the obstacle predictions (s).
	horizon_steps : int, optional
	    Coarse horizon; defaults to ``cfg.horizon_steps``.
	"""

	def __init__(
		self,
		s0: VehicleState,
		obstacles: Sequence[ObstaclePrediction],
		goals: DrivingGoals,
		cfg: DPConfig,
		geometry: RoadGeometry,
		ego_length: float = 4.5,
		omega: float = 1.2,
		fine_step: float = 0.25,
		horizon_steps: Optional[int] = None,
	) -> None:
		self.s0 = s0
		self.goals = goals
		self.cfg = cfg
		self.geometry = geometry
		self.omega = omega
		self.fine_step = fine_step
		self.horizon = horizon_steps if horizon_steps is not None else cfg.horizon_steps
		self.actions: List[Action] = sorted(
			(Action(a, m) for a in cfg.accel_set for m in cfg.lat_set),
			key=lambda act: (
				abs(act.lane_move),
				abs(act.accel),
				cfg.accel_set.index(act.accel),
				cfg.lat_set.index(act.lane_move),
			),
		)
		self.initial = DPState(
			k=0,
			x_idx=0,
			v_idx=max(0, int(round(s0.v_x / cfg.speed_step))),
			lane=lane_of(s0.y, geometry.lane_width, geometry.n_lanes),
			lc_used=0,
		)
		# blockers[h][lane]: obstacle boxes at time h * step / 2
		self._blockers = self._build_blockers(obstacles, s0.x, ego_length)
		self._feasible: Dict[Tuple[DPState, Action], Optional[DPState]] = {}

	def _build_blockers(
		self, obstacles: Sequence[ObstaclePrediction], x_ego: float, ego_length: float
	) -> List[List[List[_Blocker]]]:
		n_half = 2 * self.horizon + 1
		blockers: List[List[List[_Blocker]]] = [
			[[] for _ in range(self.geometry.n_lanes)] for _ in range(n_half)
		]
		start_lane = self.initial.lane
		for obs in obstacles:
			half_length = 0.25 * (ego_length + obs.length)
			last = obs.states.shape[0] - 1
			# a follower in the ego lane only blocks on physical contact
			tailing = obs.states[0, 0] < x_ego and start_lane in lanes_touched(
				float(obs.states[0, 1]), self.geometry.lane_width, self.geometry.n_lanes
			)
			for h in range(1, n_half):
				m = min(int(round(h * 0.5 * self.cfg.step / self.fine_step)), last)
				x_i, y_i, v_i = (float(v) for v in obs.states[m])
				box = _Blocker(
					rear=x_i - x_ego - half_length,
					front=x_i - x_ego + 2 * half_length
					if tailing
					else x_i - x_ego + self.omega * v_i + half_length,
				)
				for lane in lanes_touched(
					y_i, self.geometry.lane_width, self.geometry.n_lanes
				):
					blockers[h][lane].append(box)
		return blockers

	def speed(self, state: DPState) -> float:
		return state.v_idx * self.cfg.speed_step

	def position(self, state: DPState) -> float:
		return state.x_idx * self.cfg.position_step

	def _blocked(self, h: int, lanes: Sequence[int], x_e: float, v_e: float) -> bool:
		reach = x_e + self.omega * v_e
		for lane in lanes:
			for box in self._blockers[h][lane]:
				if reach > box.rear and x_e < box.front:
					return True
		return False

	def transition(self, state: DPState, action: Action) -> Optional[DPState]:
		"""Successor of ``state`` under ``action``, or None if infeasible."""
		key = (state, action)
		if key in self._feasible:
			return self._feasible[key]
		result = self._transition(state, action)
		self._feasible[key] = result
		return result

	def _transition(self, state: DPState, action: Action) -> Optional[DPState]:
		cfg = self.cfg
		step = cfg.step
		v = self.speed(state)
		x = self.position(state)
		v_next = v + action.accel * step
		if v_next < -1e-9:
			return None
		lane_next = state.lane + action.lane_move
		if not 0 <= lane_next < self.geometry.n_lanes:
			return None
		lc_used = state.lc_used + (action.lane_move != 0)
		if lc_used > cfg.max_lane_changes:
			return None

		half = 0.5 * step
		x_mid = x + v * half + 0.5 * action.accel * half * half
		v_mid = v + action.accel * half
		x_end = x + v * step + 0.5 * action.accel * step * step
		mid_lanes = (state.lane, lane_next) if action.lane_move else (state.lane,)
		h = 2 * state.k
		if self._blocked(h + 1, mid_lanes, x_mid, v_mid):
			return None
		if self._blocked(h + 2, (lane_next,), x_end, max(v_next, 0.0)):
			return None
		return DPState(
			k=state.k + 1,
			x_idx=int(round(x_end / cfg.position_step)),
			v_idx=int(round(v_next / cfg.speed_step)),
			lane=lane_next,
			lc_used=lc_used,
		)

	def stage_cost(self, state: DPState, action: Action) -> float:
		w1, w2, w3 = self.cfg.weights
		dv = self.speed(state) - self.goals.v_dx
		return w1 * action.accel**2 + w2 * action.lane_move**2 + w3 * dv * dv

	def path_cost(self, states: Sequence[DPState], actions: Sequence[Action]) -> float:
		"""Cost of a path, summed in step order."""
		total = 0.0
		for state, action in zip(states[:-1], actions, strict=True):
			total += self.stage_cost(state, action)
		return total

	def _to_plan(
		self,
		states: Sequence[DPState],
		actions: Sequence[Action],
		expansions: int,
		method: str,
	) -> DPPlan:
		return DPPlan(
			accel_seq=tuple(a.accel for a in actions),
			lane_seq=tuple(s.lane for s in states),
			cost=self.path_cost(states, actions),
			expansions=expansions,
			method=method,
		)

	def solve_backward(self) -> DPPlan:
		"""
		Backward recursion over the forward-reachable states.

		Raises
		------
		NoFeasiblePlanError
		    If no full-horizon path exists.
		"""
		levels: List[List[DPState]] = [[self.initial]]
		for _ in range(self.horizon):
			seen: Dict[DPState, None] = {}
			for state in levels[-1]:
				for action in self.actions:
					nxt = self.transition(state, action)
					if nxt is not None:
						seen.setdefault(nxt, None)
			levels.append(list(seen))
		evaluations = sum(len(level) for level in levels)

		value: Dict[DPState, float] = {s: 0.0 for s in levels[-1]}
		policy: Dict[DPState, Tuple[Action, DPState]] = {}
		for k in range(self.horizon - 1, -1, -1):
			for state in levels[k]:
				best = np.inf
				for action in self.actions:
					nxt = self.transition(state, action)
					if nxt is None or nxt not in value:
						continue
					candidate = self.stage_cost(state, action) + value[nxt]
					if candidate < best:
						best = candidate
						policy[state] = (action, nxt)
				if best < np.inf:
					value[state] = best

		if self.initial not in value:
			msg = 'Every coarse trajectory leaves the road, collides or reverses.'
			raise NoFeasiblePlanError(msg)

		states = [self.initial]
		actions: List[Action] = []
		while states[-1].k < self.horizon:
			action, nxt = policy[states[-1]]
			actions.append(action)
			states.append(nxt)
		return self._to_plan(states, actions, evaluations, 'backward')

	def solve_forward_bnb(self) -> DPPlan:
		"""
		Best-first forward search; stops when a full-horizon state is cheapest.

		Raises
		------
		NoFeasiblePlanError
		    If no full-horizon path exists.
		"""
		counter = itertools.count()
		heap: List[Tuple[float, int, DPState]] = [(0.0, next(counter), self.initial)]
		best_cost: Dict[DPState, float] = {self.initial: 0.0}
		parent: Dict[DPState, Tuple[DPState, Action]] = {}
		closed: set = set()
		expansions = 0

		while heap:
			cost, _, state = heapq.heappop(heap)
			if state in closed:
				continue
			closed.add(state)
			if state.k == self.horizon:
				states = [state]
				actions: List[Action] = []
				while states[-1] != self.initial:
					prev, action = parent[states[-1]]
					states.append(prev)
					actions.append(action)
				states.reverse()
				actions.reverse()
				return self._to_plan(states, actions, expansions, 'forward')
			expansions += 1
			for action in self.actions:
				nxt = self.transition(state, action)
				if nxt is None or nxt in closed:
					continue
				candidate = cost + self.stage_cost(state, action)
				if candidate < best_cost.get(nxt, np.inf):
					best_cost[nxt] = candidate
					parent[nxt] = (state, action)
					heapq.heappush(heap, (candidate, next(counter), nxt))

		msg = 'Every coarse trajectory leaves the road, collides or reverses.'
		raise NoFeasiblePlanError(msg)


def solve_backward(
	s0: VehicleState,
	obstacles: Sequence[ObstaclePrediction],
	goals: DrivingGoals,
	cfg: DPConfig,
	geometry: Optional[RoadGeometry] = None,
	ego_length: float = 4.5,
	omega: float = 1.2,
	fine_step: float = 0.25,
	horizon_steps: Optional[int] = None,
) -> DPPlan:
	"""Solve the coarse problem by backward recursion; see ``DPProblem``."""
	problem = DPProblem(
		s0,
		obstacles,
		goals,
		cfg,
		geometry or RoadGeometry(),
		ego_length=ego_length,
		omega=omega,
		fine_step=fine_step,
		horizon_steps=horizon_steps,
	)
	return problem.solve_backward()


def solve_forward_bnb(
	s0: VehicleState,
	obstacles: Sequence[ObstaclePrediction],
	goals: DrivingGoals,
	cfg: DPConfig,
	geometry: Optional[RoadGeometry] = None,
	ego_length: float = 4.5,
	omega: float = 1.2,
	fine_step: float = 0.25,
	horizon_steps: Optional[int] = None,
) -> DPPlan:
	"""Solve the coarse problem by forward branch-and-bound; see ``DPProblem``."""
	problem = DPProblem(
		s0,
		obstacles,
		goals,
		cfg,
		geometry or RoadGeometry(),
		ego_length=ego_length,
		omega=omega,
		fine_step=fine_step,
		horizon_steps=horizon_steps,
	)
	return problem.solve_forward_bnb()


def lift_to_continuous(
	plan: DPPlan,
	s0: VehicleState,
	dt: float,
	horizon: int,
	cfg: DPConfig,
	geometry: RoadGeometry,
	bounds: Optional[ControlBounds] = None,
) -> ControlTrajectory:
	"""
	Turn a coarse plan into fine-step controls.

	Jerk drives the acceleration toward the coarse acceleration of the current
	coarse step as fast as the bounds allow. A lane change becomes a symmetric
	bang-bang lateral pulse of ``4 W / tau^2`` that moves exactly one lane in
	``tau`` seconds and ends with zero lateral speed. A vehicle that starts off
	its lane centre is steered toward the reference with a critically damped
	correction.

	Parameters
	----------
	plan : DPPlan
	    Coarse plan.
	s0 : VehicleState
	    Initial state.
	dt : float
	    Fine step (s).
	horizon : int
	    Number of fine steps.
	cfg : DPConfig
	    Coarse step and lane change duration.
	geometry : RoadGeometry
	    Lane width.
	bounds : ControlBounds, optional
	    Control bounds the result is clipped to.

	Returns
	-------
	ControlTrajectory
	    ``horizon`` fine controls within bounds.
	"""
	bounds = bounds or ControlBounds()
	controls = np.zeros((horizon, 2))

	a_x = s0.a_x
	n_coarse = len(plan.accel_seq)
	for k in range(horizon):
		idx = min(int(np.floor(k * dt / cfg.step + 1e-9)), n_coarse - 1)
		target = plan.accel_seq[idx] if n_coarse else 0.0
		j_x = float(np.clip((target - a_x) / dt, bounds.j_min, bounds.j_max))
		controls[k, 0] = j_x
		a_x += j_x * dt

	a_ref = np.zeros(horizon)
	lc_step = plan.lane_change_step
	if lc_step is not None:
		direction = plan.lane_seq[lc_step + 1] - plan.lane_seq[lc_step]
		half = max(1, int(round(cfg.lane_change_duration / dt / 2)))
		start = int(round(lc_step * cfg.step / dt))
		start = max(0, min(start, horizon - 2 * half))
		a_lat = 4 * geometry.lane_width / (2 * half * dt) ** 2
		a_ref[start : start + half] = direction * a_lat
		a_ref[start + half : start + 2 * half] = -direction * a_lat

	# critically damped tracking of the reference, natural frequency 1 rad/s
	k_p, k_d = 1.0, 2.0
	y_ref = geometry.lane_center(plan.lane_seq[0]) if plan.lane_seq else s0.y
	v_ref = 0.0
	y, v_y = s0.y, s0.v_y
	for k in range(horizon):
		a_y = a_ref[k] + k_p * (y_ref - y) + k_d * (v_ref - v_y)
		a_y = float(np.clip(a_y, bounds.a_y_min, bounds.a_y_max))
		controls[k, 1] = a_y
		y += v_y * dt + 0.5 * a_y * dt * dt
		v_y += a_y * dt
		y_ref += v_ref * dt + 0.5 * a_ref[k] * dt * dt
		v_ref += a_ref[k] * dt

	log.debug(
		'Lifted coarse plan (cost %.3f, lane change at %s) to %d fine steps',
		plan.cost,
		lc_step,
		horizon,
	)
	return ControlTrajectory(controls, dt)
