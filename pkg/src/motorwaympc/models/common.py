"""
common.py

Shared data structures for the planner, the optimizer and the simulator.

Everything here is an immutable record: the planner receives snapshots of the
world and returns new plans, it never mutates what it is handed.

Classes:
    VehicleClass: Enum of the three vehicle types in the traffic mix.
    PredictionSource: Enum telling how an obstacle path was predicted.
    ReplanTrigger: Enum of the events that cause an automated vehicle to replan.
    PlanMode: Enum of how a plan was produced.
    VehicleState: Kinematic state of one vehicle at one time step.
    ControlInput: Longitudinal jerk and lateral acceleration for one step.
    ControlTrajectory: Control sequence over a planning horizon.
    CostBreakdown: Term-by-term value of the planning objective.
    ObstaclePrediction: Predicted (x, y, v_x) path of one obstacle vehicle.
    PlanDiagnostics: Solver statistics attached to a plan.
    Plan: Optimized state and control trajectories of one vehicle.
    VehicleSnapshot: Read-only view of a vehicle at the start of a sim step.
    WorldSnapshot: Read-only view of the whole road at the start of a sim step.

Functions:
    lane_of: Index of the lane containing a lateral position.
    lanes_touched: Lanes overlapped by a vehicle body centred at a lateral position.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

STATE_FIELDS: Tuple[str, ...] = ('x', 'y', 'v_x', 'v_y', 'a_x')
CONTROL_FIELDS: Tuple[str, ...] = ('j_x', 'a_y')


class VehicleClass(Enum):
	"""Vehicle type, fixed for the lifetime of a vehicle."""

	MANUAL = 'manual'
	AUTOMATED_NON_CONNECTED = 'automated_non_connected'
	AUTOMATED_CONNECTED = 'automated_connected'

	@property
	def is_automated(self) -> bool:
		return self is not VehicleClass.MANUAL

	@property
	def is_connected(self) -> bool:
		return self is VehicleClass.AUTOMATED_CONNECTED


class PredictionSource(Enum):
	"""How an obstacle prediction was produced."""

	EXTRAPOLATED = 'extrapolated'
	BROADCAST = 'broadcast'


class ReplanTrigger(Enum):
	"""Reason for (re-)planning; ``NONE`` means keep the active plan."""

	NONE = 'none'
	INITIAL = 'initial'
	HALF_HORIZON = 'half_horizon'
	OBSTACLE_DEVIATION = 'obstacle_deviation'
	NEW_OBSTACLE = 'new_obstacle'
	TRACKING_FAILURE = 'tracking_failure'


class PlanMode(Enum):
	"""How a plan was produced."""

	NORMAL = 'normal'
	OVERRIDE = 'override'
	FALLBACK = 'fallback'


@dataclass(frozen=True)
class VehicleState:
	"""
	Kinematic state of a vehicle, SI units.

	Attributes
	----------
	x : float
	    Longitudinal position (m).
	y : float
	    Lateral position (m), 0 is the right road edge.
	v_x : float
	    Longitudinal speed (m/s).
	v_y : float
	    Lateral speed (m/s).
	a_x : float
	    Longitudinal acceleration (m/s^2).
	"""

	x: float
	y: float
	v_x: float
	v_y: float
	a_x: float

	def as_array(self) -> np.ndarray:
		return np.array([self.x, self.y, self.v_x, self.v_y, self.a_x], dtype=float)

	@classmethod
	def from_array(cls, values: np.ndarray) -> VehicleState:
		x, y, v_x, v_y, a_x = (float(v) for v in values)
		return cls(x=x, y=y, v_x=v_x, v_y=v_y, a_x=a_x)

	def is_finite(self) -> bool:
		return bool(np.all(np.isfinite(self.as_array())))


@dataclass(frozen=True)
class ControlInput:
	"""Jerk ``j_x`` and lateral acceleration ``a_y``, held over one step."""

	j_x: float
	a_y: float


@dataclass(frozen=True, eq=False)
class ControlTrajectory:
	"""
	Control sequence over a planning horizon.

	Attributes
	----------
	values : np.ndarray
	    Array of shape ``(K, 2)``; column 0 is ``j_x``, column 1 is ``a_y``.
	dt : float
	    Step length ``T`` in seconds.
	"""

	values: np.ndarray
	dt: float

	def __post_init__(self) -> None:
		values = np.array(self.values, dtype=float).reshape(-1, 2)
		values.setflags(write=False)
		object.__setattr__(self, 'values', values)
		if self.dt <= 0:
			msg = f'Step length must be positive, got {self.dt}.'
			raise ValueError(msg)

	@classmethod
	def zeros(cls, horizon: int, dt: float) -> ControlTrajectory:
		return cls(np.zeros((horizon, 2)), dt)

	@classmethod
	def from_steps(cls, steps: List[ControlInput], dt: float) -> ControlTrajectory:
		return cls(np.array([[u.j_x, u.a_y] for u in steps], dtype=float), dt)

	@property
	def horizon(self) -> int:
		return int(self.values.shape[0])

	@property
	def steps(self) -> List[ControlInput]:
		return [ControlInput(float(j), float(a)) for j, a in self.values]

	def __len__(self) -> int:
		return self.horizon

	def __iter__(self) -> Iterator[ControlInput]:
		return iter(self.steps)

	def __getitem__(self, k: int) -> ControlInput:
		j_x, a_y = self.values[k]
		return ControlInput(float(j_x), float(a_y))

	def __eq__(self, other: object) -> bool:
		if not isinstance(other, ControlTrajectory):
			return NotImplemented
		return self.dt == other.dt and np.array_equal(self.values, other.values)

	__hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class CostBreakdown:
	"""
	Weighted contribution of every objective term, summed over the horizon.

	``total`` is the objective value ``J``.
	"""

	jerk: float = 0.0
	acceleration: float = 0.0
	lateral_acceleration: float = 0.0
	speed: float = 0.0
	lateral_speed: float = 0.0
	road: float = 0.0
	collision: float = 0.0
	negative_speed: float = 0.0

	@property
	def total(self) -> float:
		return (
			self.jerk
			+ self.acceleration
			+ self.lateral_acceleration
			+ self.speed
			+ self.lateral_speed
			+ self.road
			+ self.collision
			+ self.negative_speed
		)

	def as_dict(self) -> Dict[str, float]:
		return {
			'jerk': self.jerk,
			'acceleration': self.acceleration,
			'lateral_acceleration': self.lateral_acceleration,
			'speed': self.speed,
			'lateral_speed': self.lateral_speed,
			'road': self.road,
			'collision': self.collision,
			'negative_speed': self.negative_speed,
			'total': self.total,
		}


@dataclass(frozen=True, eq=False)
class ObstaclePrediction:
	"""
	Predicted path of an obstacle vehicle over the ego horizon.

	Attributes
	----------
	vehicle_id : int
	    Id of the obstacle vehicle.
	states : np.ndarray
	    Array of shape ``(K + 1, 3)`` with columns ``x, y, v_x``; row ``k`` is
	    the prediction ``k`` steps after the ego's planning time.
	source : PredictionSource
	    Whether the path is extrapolated or taken from a broadcast plan.
	length : float
	    Physical length of the obstacle (m).
	vehicle_class : VehicleClass
	    Class of the obstacle vehicle.
	"""

	vehicle_id: int
	states: np.ndarray
	source: PredictionSource
	length: float
	vehicle_class: VehicleClass = VehicleClass.MANUAL

	def __post_init__(self) -> None:
		states = np.array(self.states, dtype=float).reshape(-1, 3)
		states.setflags(write=False)
		object.__setattr__(self, 'states', states)

	@property
	def x(self) -> np.ndarray:
		return self.states[:, 0]

	@property
	def y(self) -> np.ndarray:
		return self.states[:, 1]

	@property
	def v_x(self) -> np.ndarray:
		return self.states[:, 2]


@dataclass(frozen=True)
class PlanDiagnostics:
	"""Solver statistics of one planning call; timings are wall-clock microseconds."""

	dp_cost: Optional[float] = None
	fda_cost: float = float('nan')
	initial_cost: float = float('nan')
	iterations: int = 0
	converged: bool = False
	dp_feasible: bool = True
	dp_expansions: int = 0
	timings_us: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class Plan:
	"""
	Open-loop plan of an automated vehicle.

	Attributes
	----------
	plan_id : int
	    Identifier, unique within a simulation.
	vehicle_id : int
	    Owner of the plan.
	controls : ControlTrajectory
	    Optimized controls, ``K`` steps.
	states : np.ndarray
	    Rollout of ``controls`` from the planning state, ``(K + 1, 5)``.
	cost : CostBreakdown
	    Objective value of the plan.
	created_at : float
	    Simulation time of the planning state (s).
	valid_until : float
	    Time after which the plan must be replaced, ``created_at + K T / 2``.
	mode : PlanMode
	    Normal plan, safety override or braking fallback.
	desired_speed : float
	    Longitudinal desired speed the plan was optimized for.
	trigger : ReplanTrigger
	    Event that caused the plan.
	predictions : tuple of ObstaclePrediction
	    Obstacle predictions used, kept for deviation checks.
	diagnostics : PlanDiagnostics
	    Solver statistics.
	"""

	plan_id: int
	vehicle_id: int
	controls: ControlTrajectory
	states: np.ndarray
	cost: CostBreakdown
	created_at: float
	valid_until: float
	mode: PlanMode = PlanMode.NORMAL
	desired_speed: float = 0.0
	trigger: ReplanTrigger = ReplanTrigger.INITIAL
	predictions: Tuple[ObstaclePrediction, ...] = ()
	diagnostics: PlanDiagnostics = field(default_factory=PlanDiagnostics)

	@property
	def horizon(self) -> int:
		return self.controls.horizon

	@property
	def dt(self) -> float:
		return self.controls.dt

	@property
	def safety_mode(self) -> bool:
		return self.mode is not PlanMode.NORMAL

	@property
	def obstacle_ids(self) -> frozenset:
		return frozenset(p.vehicle_id for p in self.predictions)

	def step_index(self, t: float) -> int:
		"""Index of the control step that is active at simulation time ``t``."""
		return int(round((t - self.created_at) / self.dt))

	def state_at(self, t: float) -> Optional[VehicleState]:
		"""Planned state at time ``t``, or None outside the plan."""
		k = self.step_index(t)
		if 0 <= k < self.states.shape[0]:
			return VehicleState.from_array(self.states[k])
		return None


@dataclass(frozen=True)
class VehicleSnapshot:
	"""
	Read-only view of one vehicle at the start of a simulation step.

	Attributes
	----------
	vehicle_id : int
	    Unique vehicle id.
	vehicle_class : VehicleClass
	    Manual, automated or connected automated.
	length : float
	    Vehicle length (m).
	time_gap : float
	    Desired time gap omega (s).
	desired_speed : float
	    Desired longitudinal speed (m/s).
	state : VehicleState
	    Kinematic state.
	"""

	vehicle_id: int
	vehicle_class: VehicleClass
	length: float
	time_gap: float
	desired_speed: float
	state: VehicleState


@dataclass(frozen=True, eq=False)
class WorldSnapshot:
	"""
	Immutable view of the road handed to planners.

	Vehicles are kept sorted by longitudinal position so that zone queries are
	logarithmic in the number of vehicles.

	Attributes
	----------
	clock : float
	    Simulation time (s).
	vehicles : tuple of VehicleSnapshot
	    All vehicles on the road, sorted by ``(x, vehicle_id)``.
	broadcasts : Mapping[int, Plan]
	    Latest plans visible to connected vehicles, keyed by vehicle id.
	"""

	clock: float
	vehicles: Tuple[VehicleSnapshot, ...]
	broadcasts: Mapping[int, Plan] = field(default_factory=dict)

	def __post_init__(self) -> None:
		ordered = tuple(
			sorted(self.vehicles, key=lambda v: (v.state.x, v.vehicle_id))
		)
		object.__setattr__(self, 'vehicles', ordered)
		object.__setattr__(self, '_xs', [v.state.x for v in ordered])
		object.__setattr__(self, '_by_id', {v.vehicle_id: v for v in ordered})

	def __getitem__(self, vehicle_id: int) -> VehicleSnapshot:
		try:
			return self._by_id[vehicle_id]  # type: ignore[attr-defined, no-any-return]
		except KeyError as ke:
			msg = f'Vehicle {vehicle_id} is not on the road at t={self.clock}.'
			raise KeyError(msg) from ke

	def __contains__(self, vehicle_id: object) -> bool:
		return vehicle_id in self._by_id  # type: ignore[attr-defined]

	def __len__(self) -> int:
		return len(self.vehicles)

	def ids(self) -> List[int]:
		return [v.vehicle_id for v in self.vehicles]

	def within(self, x_min: float, x_max: float) -> List[VehicleSnapshot]:
		"""Vehicles with ``x_min <= x <= x_max`` (closed interval)."""
		lo = bisect.bisect_left(self._xs, x_min)  # type: ignore[attr-defined]
		hi = bisect.bisect_right(self._xs, x_max)  # type: ignore[attr-defined]
		return list(self.vehicles[lo:hi])


def lane_of(y: float, lane_width: float, n_lanes: Optional[int] = None) -> int:
	"""
	Lane index of lateral position ``y``: ``floor(y / lane_width)``.

	A position on a lane boundary belongs to the upper lane; with ``n_lanes``
	the result is clipped to the road, so ``y == width`` maps to the top lane.
	"""
	lane = int(np.floor(y / lane_width))
	if n_lanes is not None:
		lane = min(max(lane, 0), n_lanes - 1)
	return lane


def lanes_touched(y: float, lane_width: float, n_lanes: int) -> List[int]:
	"""Lanes whose centre is closer than one lane width to ``y``."""
	return [
		lane
		for lane in range(n_lanes)
		if abs(y - (lane + 0.5) * lane_width) < lane_width
	]
