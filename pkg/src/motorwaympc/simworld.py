"""
simworld.py

Deterministic multi-lane motorway microsimulation.

Manual vehicles follow the intelligent driver model and change lanes with a
gap-acceptance rule; automated vehicles execute their open-loop plans and
replan when triggered. A step of the simulation is

1. take an immutable snapshot of the road,
2. replan the automated vehicles whose triggers fired,
3. advance automated vehicles along their plans,
4. advance manual vehicles (lane changes, then car following),
5. remove vehicles past the end of the section and insert arrivals,
6. audit overlaps, road departures and negative speeds,
7. hand the per-vehicle rows to the metrics and the trace writer.

Given the same configuration and seed, a run is bit-for-bit reproducible and
independent of the number of planner threads.
"""

from __future__ import annotations

import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from motorwaympc.exceptions import PlanningFailureError
from motorwaympc.kinematics import step_state
from motorwaympc.logging_config import logger as log
from motorwaympc.models.common import (
	ControlInput,
	Plan,
	ReplanTrigger,
	VehicleClass,
	VehicleSnapshot,
	VehicleState,
	WorldSnapshot,
	lane_of,
)
from motorwaympc.models.config import (
	ManualDriverParams,
	ScenarioConfig,
	SpawnConfig,
)
from motorwaympc.planner import PathPlanner

__all__ = [
	'AUDIT_COLUMNS',
	'AuditEvent',
	'Simulation',
	'StepRecord',
	'TRACE_COLUMNS',
	'Vehicle',
	'expected_arrivals',
	'idm_accel',
	'lane_of',
	'manual_lane_change',
]

TRACE_COLUMNS: Tuple[str, ...] = (
	't',
	'id',
	'class',
	'x',
	'y',
	'lane',
	'v_x',
	'v_y',
	'a_x',
	'j_x',
	'a_y',
	'plan_id',
	'plan_mode',
	'v_d',
)

AUDIT_COLUMNS: Tuple[str, ...] = ('t', 'kind', 'violation', 'vehicle_ids', 'detail')

VIOLATION_KINDS = frozenset({'overlap', 'road_departure', 'negative_speed'})


@dataclass
class Vehicle:
	"""
	A vehicle owned by the simulation.

	Attributes
	----------
	vehicle_id : int
	    Unique id, assigned in order of entry.
	vehicle_class : VehicleClass
	    Manual or automated (connected or not).
	length : float
	    Length (m).
	time_gap : float
	    Desired time gap (s).
	desired_speed : float
	    Desired speed (m/s).
	state : VehicleState
	    Current kinematic state.
	entered_at : float
	    Time the vehicle entered the section.
	plan : Plan, optional
	    Active plan of an automated vehicle.
	tracking_failed : bool
	    Set when the last commanded motion had to be corrected.
	last_lane_change : float
	    Time of the last manual lane change.
	controls : ControlInput, optional
	    Controls applied in the last step (automated vehicles).
	"""

	vehicle_id: int
	vehicle_class: VehicleClass
	length: float
	time_gap: float
	desired_speed: float
	state: VehicleState
	entered_at: float = 0.0
	plan: Optional[Plan] = None
	tracking_failed: bool = False
	last_lane_change: float = -math.inf
	controls: Optional[ControlInput] = None

	def snapshot(self) -> VehicleSnapshot:
		return VehicleSnapshot(
			vehicle_id=self.vehicle_id,
			vehicle_class=self.vehicle_class,
			length=self.length,
			time_gap=self.time_gap,
			desired_speed=self.desired_speed,
			state=self.state,
		)


@dataclass(frozen=True)
class AuditEvent:
	"""One audit log entry; ``violation`` marks safety violations."""

	t: float
	kind: str
	vehicle_ids: Tuple[int, ...]
	detail: str = ''

	@property
	def violation(self) -> bool:
		return self.kind in VIOLATION_KINDS

	def as_row(self) -> Dict[str, Any]:
		return {
			't': self.t,
			'kind': self.kind,
			'violation': self.violation,
			'vehicle_ids': ' '.join(str(v) for v in self.vehicle_ids),
			'detail': self.detail,
		}


@dataclass
class StepRecord:
	"""Everything one simulation step produced."""

	t: float
	rows: List[Dict[str, Any]] = field(default_factory=list)
	events: List[AuditEvent] = field(default_factory=list)
	plans: List[Plan] = field(default_factory=list)


def idm_accel(
	gap: float,
	v: float,
	v_lead: float,
	v0: float,
	time_gap: float,
	params: ManualDriverParams,
) -> float:
	"""
	Intelligent driver model acceleration.

	Parameters
	----------
	gap : float
	    Bumper-to-bumper distance to the leader (m); ``inf`` without leader.
	v : float
	    Own speed (m/s).
	v_lead : float
	    Leader speed (m/s).
	v0 : float
	    Desired speed (m/s).
	time_gap : float
	    Desired time gap (s).
	params : ManualDriverParams
	    Maximum acceleration, comfortable deceleration, jam distance, exponent.

	Returns
	-------
	float
	    Acceleration (m/s^2), never below ``-params.emergency_decel``; a
	    non-positive gap returns exactly that emergency value.
	"""
	if gap <= 0:
		return -params.emergency_decel
	free = (v / v0) ** params.delta if v0 > 0 else 1.0
	if math.isinf(gap):
		return params.a_max * (1.0 - free)
	interaction = v * (v - v_lead) / (2.0 * math.sqrt(params.a_max * params.b_comf))
	dynamic = v * time_gap + interaction
	s_star = params.s0_jam + max(0.0, dynamic)
	accel = params.a_max * (1.0 - free - (s_star / gap) ** 2)
	return max(accel, -params.emergency_decel)


def expected_arrivals(cfg: SpawnConfig, dt: float) -> float:
	"""Mean number of arrivals per step of length ``dt``."""
	return cfg.inflow / 3600.0 * dt


def _neighbours(
	x: float,
	lane_center: float,
	lane_width: float,
	others: List[Vehicle],
	exclude: int,
) -> Tuple[Optional[Vehicle], Optional[Vehicle]]:
	"""Nearest vehicles ahead of and behind ``x`` touching the lane at ``lane_center``."""
	leader: Optional[Vehicle] = None
	follower: Optional[Vehicle] = None
	for other in others:
		if other.vehicle_id == exclude:
			continue
		if abs(other.state.y - lane_center) >= lane_width:
			continue
		ox = other.state.x
		if ox >= x:
			if leader is None or (ox, other.vehicle_id) < (leader.state.x, leader.vehicle_id):
				leader = other
		elif follower is None or (ox, other.vehicle_id) > (
			follower.state.x,
			follower.vehicle_id,
		):
			follower = other
	return leader, follower


def _gap(rear: Vehicle, front: Vehicle) -> float:
	return front.state.x - rear.state.x - 0.5 * (rear.length + front.length)


def _accel_behind(
	vehicle: Vehicle, leader: Optional[Vehicle], params: ManualDriverParams
) -> float:
	if leader is None:
		return idm_accel(
			math.inf, vehicle.state.v_x, 0.0, vehicle.desired_speed, vehicle.time_gap, params
		)
	return idm_accel(
		_gap(vehicle, leader),
		vehicle.state.v_x,
		leader.state.v_x,
		vehicle.desired_speed,
		vehicle.time_gap,
		params,
	)


def manual_lane_change(
	vehicle: Vehicle,
	others: List[Vehicle],
	now: float,
	config: ScenarioConfig,
) -> Optional[int]:
	"""
	Lane a manual driver moves to, or None to stay.

	A move to an adjacent lane needs at least the jam distance to the new
	leader and follower, may not force the new follower to brake harder than
	the safe deceleration, and must improve the driver's own acceleration by
	more than the incentive threshold. Of two admissible lanes the one with the
	larger gain wins, the left one on a tie; drivers wait ``cooldown`` seconds
	between changes.
	"""
	params = config.driver
	road = config.road
	if now - vehicle.last_lane_change < params.cooldown:
		return None
	lane = lane_of(vehicle.state.y, road.lane_width, road.n_lanes)
	leader, _ = _neighbours(
		vehicle.state.x, road.lane_center(lane), road.lane_width, others, vehicle.vehicle_id
	)
	current = _accel_behind(vehicle, leader, params)

	best: Optional[int] = None
	best_gain = params.incentive
	for target in (lane + 1, lane - 1):
		if not 0 <= target < road.n_lanes:
			continue
		new_leader, new_follower = _neighbours(
			vehicle.state.x,
			road.lane_center(target),
			road.lane_width,
			others,
			vehicle.vehicle_id,
		)
		if new_leader is not None and _gap(vehicle, new_leader) < params.s0_jam:
			continue
		if new_follower is not None:
			if _gap(new_follower, vehicle) < params.s0_jam:
				continue
			follower_accel = idm_accel(
				_gap(new_follower, vehicle),
				new_follower.state.v_x,
				vehicle.state.v_x,
				new_follower.desired_speed,
				new_follower.time_gap,
				params,
			)
			if follower_accel < -params.safe_decel:
				continue
		gain = _accel_behind(vehicle, new_leader, params) - current
		if gain > best_gain:
			best, best_gain = target, gain
	return best


class Simulation:
	"""
	State of a simulated motorway section and its stepping logic.

	Parameters
	----------
	config : ScenarioConfig
	    Scenario to simulate.
	seed : int
	    Seed of the random generator driving arrivals and vehicle attributes.
	planner : PathPlanner, optional
	    Planner shared by all automated vehicles.
	"""

	def __init__(
		self,
		config: ScenarioConfig,
		seed: int = 0,
		planner: Optional[PathPlanner] = None,
	) -> None:
		self.config = config
		self.seed = seed
		self.dt = config.planner.step
		self.rng = np.random.default_rng(seed)
		self.planner = planner or PathPlanner(config)
		self.vehicles: Dict[int, Vehicle] = {}
		self.broadcasts: Dict[int, Plan] = {}
		self.queue: Deque[Tuple[VehicleClass, float, float, float]] = deque()
		self.steps = 0
		self.entered = 0
		self.exited = 0
		self._next_id = 0
		self._next_plan_id = 0

	@property
	def clock(self) -> float:
		return self.steps * self.dt

	@property
	def automated_class(self) -> VehicleClass:
		if self.config.spawn.connectivity == 'connected':
			return VehicleClass.AUTOMATED_CONNECTED
		return VehicleClass.AUTOMATED_NON_CONNECTED

	def add_vehicle(
		self,
		vehicle_class: VehicleClass,
		state: VehicleState,
		desired_speed: float,
		time_gap: float = 1.2,
		length: float = 4.5,
	) -> Vehicle:
		"""Put a vehicle on the road now and return it."""
		vehicle = Vehicle(
			vehicle_id=self._next_id,
			vehicle_class=vehicle_class,
			length=length,
			time_gap=time_gap,
			desired_speed=desired_speed,
			state=state,
			entered_at=self.clock,
		)
		self._next_id += 1
		self.vehicles[vehicle.vehicle_id] = vehicle
		self.entered += 1
		return vehicle

	def snapshot(self) -> WorldSnapshot:
		return WorldSnapshot(
			clock=self.clock,
			vehicles=tuple(v.snapshot() for v in self.vehicles.values()),
			broadcasts=dict(self.broadcasts),
		)

	def _ordered(self) -> List[Vehicle]:
		return [self.vehicles[vid] for vid in sorted(self.vehicles)]

	# ------------------------------------------------------------------
	# step phases

	def _replan(self, snap: WorldSnapshot, record: StepRecord) -> Dict[int, Plan]:
		tasks: List[Tuple[Vehicle, ReplanTrigger, int]] = []
		for vehicle in self._ordered():
			if not vehicle.vehicle_class.is_automated:
				continue
			trigger = self.planner.needs_replan(
				snap[vehicle.vehicle_id], vehicle.plan, snap, vehicle.tracking_failed
			)
			if trigger is ReplanTrigger.NONE:
				continue
			tasks.append((vehicle, trigger, self._next_plan_id))
			self._next_plan_id += 1

		def work(
			task: Tuple[Vehicle, ReplanTrigger, int],
		) -> Tuple[Plan, Optional[PlanningFailureError]]:
			vehicle, trigger, plan_id = task
			return self.planner.replan(snap[vehicle.vehicle_id], snap, plan_id, trigger)

		workers = self.config.workers
		if workers > 1 and len(tasks) > 1:
			with ThreadPoolExecutor(max_workers=workers) as pool:
				results = list(pool.map(work, tasks))
		else:
			results = [work(task) for task in tasks]

		published: Dict[int, Plan] = {}
		for (vehicle, _, _), (plan, failure) in zip(tasks, results, strict=True):
			vehicle.plan = plan
			vehicle.tracking_failed = False
			record.plans.append(plan)
			if failure is not None:
				record.events.append(
					AuditEvent(snap.clock, 'planning_failure', (vehicle.vehicle_id,), str(failure))
				)
			elif not plan.diagnostics.dp_feasible:
				record.events.append(
					AuditEvent(snap.clock, 'dp_infeasible', (vehicle.vehicle_id,))
				)
			if vehicle.vehicle_class.is_connected:
				published[vehicle.vehicle_id] = plan
		return published

	def _guard(
		self, vehicle: Vehicle, new: VehicleState, snap: WorldSnapshot
	) -> Tuple[VehicleState, List[str]]:
		"""Correct a commanded motion the road cannot accept."""
		road = self.config.road
		old = vehicle.state
		x, y, v_x, v_y, a_x = new.x, new.y, new.v_x, new.v_y, new.a_x
		notes: List[str] = []

		if v_x < 0:
			x, v_x, a_x = max(x, old.x), 0.0, 0.0
			notes.append('stopped instead of reversing')
		if not 0.0 <= y <= road.width:
			y, v_y = min(max(y, 0.0), road.width), 0.0
			notes.append('kept on the road')

		old_lane = lane_of(old.y, road.lane_width, road.n_lanes)
		others = [o for o in snap.vehicles if o.vehicle_id != vehicle.vehicle_id]
		if lane_of(y, road.lane_width, road.n_lanes) != old_lane:
			for o in others:
				if abs(x - o.state.x) < 0.5 * (vehicle.length + o.length) and abs(
					y - o.state.y
				) < road.lane_width and abs(old.y - o.state.y) >= road.lane_width:
					y, v_y = old.y, 0.0
					notes.append(f'lane change blocked by {o.vehicle_id}')
					break

		ahead = [
			o
			for o in others
			if o.state.x >= old.x and abs(y - o.state.y) < road.lane_width
		]
		if ahead:
			leader = min(ahead, key=lambda o: (o.state.x, o.vehicle_id))
			limit = leader.state.x - 0.5 * (vehicle.length + leader.length) - 1e-3
			if x > limit:
				x = max(limit, old.x)
				v_x = min(v_x, leader.state.v_x)
				a_x = min(a_x, 0.0)
				notes.append(f'held behind {leader.vehicle_id}')
		return VehicleState(x=x, y=y, v_x=v_x, v_y=v_y, a_x=a_x), notes

	def _advance_automated(self, snap: WorldSnapshot, record: StepRecord) -> None:
		for vehicle in self._ordered():
			if not vehicle.vehicle_class.is_automated or vehicle.plan is None:
				continue
			plan = vehicle.plan
			k = plan.step_index(snap.clock)
			u = plan.controls[k] if 0 <= k < plan.horizon else ControlInput(0.0, 0.0)
			commanded = step_state(vehicle.state, u, self.dt)
			state, notes = self._guard(vehicle, commanded, snap)
			if notes:
				vehicle.tracking_failed = True
				record.events.append(
					AuditEvent(snap.clock, 'intervention', (vehicle.vehicle_id,), '; '.join(notes))
				)
			vehicle.state = state
			vehicle.controls = u

	def _advance_manual(self, snap: WorldSnapshot, record: StepRecord) -> None:
		road = self.config.road
		params = self.config.driver
		now = snap.clock
		# positions and speeds from the snapshot, lanes updated as drivers decide
		working = {
			vid: replace(v, state=snap[vid].state, plan=None)
			for vid, v in self.vehicles.items()
		}
		manual = [
			working[vid]
			for vid in sorted(working)
			if not working[vid].vehicle_class.is_automated
		]
		everyone = list(working.values())

		for vehicle in manual:
			target = manual_lane_change(vehicle, everyone, now, self.config)
			if target is not None:
				s = vehicle.state
				vehicle.state = VehicleState(s.x, road.lane_center(target), s.v_x, 0.0, s.a_x)
				vehicle.last_lane_change = now

		for vehicle in manual:
			s = vehicle.state
			leader, _ = _neighbours(
				s.x, s.y, road.lane_width, everyone, vehicle.vehicle_id
			)
			if leader is not None and _gap(vehicle, leader) <= 0:
				record.events.append(
					AuditEvent(now, 'emergency_braking', (vehicle.vehicle_id, leader.vehicle_id))
				)
			accel = _accel_behind(vehicle, leader, params)
			v_next = s.v_x + accel * self.dt
			if v_next < 0:
				x_next = s.x + s.v_x * s.v_x / (2.0 * -accel) if accel < 0 else s.x
				v_next = 0.0
			else:
				x_next = s.x + 0.5 * (s.v_x + v_next) * self.dt
			target_vehicle = self.vehicles[vehicle.vehicle_id]
			target_vehicle.state = VehicleState(
				x=x_next, y=s.y, v_x=v_next, v_y=0.0, a_x=(v_next - s.v_x) / self.dt
			)
			target_vehicle.last_lane_change = vehicle.last_lane_change

	def _draw_arrivals(self) -> None:
		spawn = self.config.spawn
		n_arrivals = int(self.rng.poisson(expected_arrivals(spawn, self.dt)))
		for _ in range(n_arrivals):
			automated = self.rng.random() < spawn.penetration
			desired = self.rng.uniform(*spawn.speed_range_kmh) / 3.6
			time_gap = self.rng.uniform(*spawn.time_gap_range)
			length = self.rng.uniform(*spawn.length_range)
			vehicle_class = self.automated_class if automated else VehicleClass.MANUAL
			self.queue.append((vehicle_class, float(desired), float(time_gap), float(length)))

	def spawn(self) -> List[Vehicle]:
		"""
		Draw this step's arrivals and insert queued vehicles at ``x = 0``.

		A lane admits a vehicle if the speed that keeps its time gap behind the
		lane's last vehicle is at least the smaller of its desired speed and the
		leader's speed; the lane is drawn uniformly among admissible ones.
		Arrivals wait in order of arrival while no lane admits the head.
		"""
		self._draw_arrivals()
		road = self.config.road
		params = self.config.driver
		inserted: List[Vehicle] = []
		while self.queue:
			vehicle_class, desired, time_gap, length = self.queue[0]
			options: List[Tuple[int, float]] = []
			for lane in range(road.n_lanes):
				center = road.lane_center(lane)
				leader = min(
					(
						v
						for v in self.vehicles.values()
						if abs(v.state.y - center) < road.lane_width
					),
					key=lambda v: (v.state.x, v.vehicle_id),
					default=None,
				)
				if leader is None:
					options.append((lane, desired))
					continue
				gap = leader.state.x - 0.5 * (length + leader.length)
				entry = min(desired, (gap - params.s0_jam) / time_gap)
				if gap > params.s0_jam and entry >= min(desired, leader.state.v_x):
					options.append((lane, entry))
			if not options:
				break
			lane, speed = options[int(self.rng.integers(len(options)))]
			self.queue.popleft()
			vehicle = Vehicle(
				vehicle_id=self._next_id,
				vehicle_class=vehicle_class,
				length=length,
				time_gap=time_gap,
				desired_speed=desired,
				state=VehicleState(0.0, road.lane_center(lane), speed, 0.0, 0.0),
				entered_at=self.clock,
			)
			self._next_id += 1
			self.vehicles[vehicle.vehicle_id] = vehicle
			self.entered += 1
			inserted.append(vehicle)
		return inserted

	def audit(self) -> List[AuditEvent]:
		"""Overlaps, road departures and negative speeds at the current time."""
		road = self.config.road
		now = self.clock
		events: List[AuditEvent] = []
		ordered = sorted(self.vehicles.values(), key=lambda v: (v.state.x, v.vehicle_id))
		longest = max((v.length for v in ordered), default=0.0)
		for i, a in enumerate(ordered):
			for b in ordered[i + 1 :]:
				if b.state.x - a.state.x >= longest:
					break
				if abs(b.state.x - a.state.x) < 0.5 * (a.length + b.length) and abs(
					b.state.y - a.state.y
				) < road.lane_width:
					pair = tuple(sorted((a.vehicle_id, b.vehicle_id)))
					events.append(AuditEvent(now, 'overlap', pair))
		for v in self._ordered():
			if not -1e-9 <= v.state.y <= road.width + 1e-9:
				events.append(
					AuditEvent(now, 'road_departure', (v.vehicle_id,), f'y={v.state.y:.3f}')
				)
			if v.state.v_x < -0.01:
				events.append(
					AuditEvent(now, 'negative_speed', (v.vehicle_id,), f'v_x={v.state.v_x:.3f}')
				)
		for event in events:
			log.warning('[bold magenta]t=%.2f:[/] %s %s', now, event.kind, event.vehicle_ids)
		return events

	def _row(self, vehicle: Vehicle) -> Dict[str, Any]:
		s = vehicle.state
		road = self.config.road
		automated = vehicle.vehicle_class.is_automated
		plan = vehicle.plan
		return {
			't': self.clock,
			'id': vehicle.vehicle_id,
			'class': vehicle.vehicle_class.value,
			'x': s.x,
			'y': s.y,
			'lane': lane_of(s.y, road.lane_width, road.n_lanes),
			'v_x': s.v_x,
			'v_y': s.v_y,
			'a_x': s.a_x,
			'j_x': vehicle.controls.j_x if automated and vehicle.controls else None,
			'a_y': vehicle.controls.a_y if automated and vehicle.controls else None,
			'plan_id': plan.plan_id if automated and plan else None,
			'plan_mode': plan.mode.value if automated and plan else '',
			'v_d': vehicle.desired_speed,
		}

	def step(self) -> StepRecord:
		"""Advance the simulation by one step and report what happened."""
		snap = self.snapshot()
		record = StepRecord(t=snap.clock + self.dt)

		published = self._replan(snap, record)
		self._advance_automated(snap, record)
		self._advance_manual(snap, record)
		self.steps += 1

		section = self.config.road.section_length
		exiting = [v for v in self._ordered() if v.state.x >= section]
		for vehicle in exiting:
			record.rows.append(self._row(vehicle))
			del self.vehicles[vehicle.vehicle_id]
			self.broadcasts.pop(vehicle.vehicle_id, None)
			published.pop(vehicle.vehicle_id, None)
			self.exited += 1
		self.spawn()

		record.events.extend(self.audit())
		record.rows.extend(self._row(v) for v in self._ordered())
		record.rows.sort(key=lambda row: row['id'])
		self.broadcasts.update(published)
		return record

	def run(
		self,
		duration: float,
		on_step: Optional[Callable[[StepRecord], None]] = None,
	) -> int:
		"""Step until ``duration`` seconds have been simulated; return the step count."""
		n_steps = int(round(duration / self.dt))
		for _ in range(n_steps):
			record = self.step()
			if on_step is not None:
				on_step(record)
		log.info(
			'[bold magenta]seed %d:[/] simulated %.0f s, %d vehicles entered, %d exited',
			self.seed,
			self.clock,
			self.entered,
			self.exited,
		)
		return n_steps

	def __repr__(self) -> str:
		return (
			f'Simulation(t={self.clock}, vehicles={len(self.vehicles)}, '
			f'queued={len(self.queue)}, entered={self.entered}, exited={self.exited})'
		)
