"""
metrics.py

Traffic performance indicators of a simulation run.

The accumulator consumes trace rows, either live from the simulation or read
back from ``trace.csv``, so a report recomputed from the trace equals the one
written at the end of the run.

Classes:
    TripAccumulator: Per-vehicle running sums.
    ClassMetrics: Means over the completed trips of one vehicle class.
    MetricsReport: Report of a whole run.
    MetricsAccumulator: Collects rows, plans and audit events of a run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Set

import numpy as np
import pandas as pd

from motorwaympc.logging_config import logger as log
from motorwaympc.models.common import Plan
from motorwaympc.simworld import StepRecord

SCHEMA = 'motorway-mpc/metrics'
SCHEMA_VERSION = 1
STAGES = ('dp', 'bnb', 'fda', 'total')
TABLE_HEADERS = [
	'Class',
	'Vehicles',
	'Delay (s/km)',
	'Speed (km/h)',
	'Lane changes',
	'|v - v_d| (m/s)',
	'Plans',
]


def _missing(value: Any) -> bool:
	if value is None or value == '':
		return True
	return isinstance(value, float) and math.isnan(value)


@dataclass
class TripAccumulator:
	"""Running sums for one vehicle, fed row by row in time order."""

	vehicle_class: str
	desired_speed: float
	t_start: float
	x_start: float
	t_prev: float
	x_prev: float
	lane_prev: int
	lane_changes: int = 0
	deviation_sum: float = 0.0
	samples: int = 0
	plan_ids: Set[int] = field(default_factory=set)
	t_exit: Optional[float] = None

	@property
	def automated(self) -> bool:
		return self.vehicle_class != 'manual'

	def add(
		self, t: float, x: float, lane: int, v_x: float, section_length: float
	) -> None:
		if self.t_exit is not None:
			return
		if lane != self.lane_prev:
			self.lane_changes += 1
		self.deviation_sum += abs(v_x - self.desired_speed)
		self.samples += 1
		if x >= section_length:
			if x > self.x_prev:
				share = (section_length - self.x_prev) / (x - self.x_prev)
				self.t_exit = self.t_prev + share * (t - self.t_prev)
			else:
				self.t_exit = t
		self.t_prev, self.x_prev, self.lane_prev = t, x, lane

	def travel_time(self) -> Optional[float]:
		if self.t_exit is None:
			return None
		return self.t_exit - self.t_start

	def delay_per_km(self, section_length: float) -> float:
		"""Travel time beyond ``distance / v_d``, floored at zero, per km."""
		distance = section_length - self.x_start
		tt = self.travel_time()
		if tt is None or distance <= 0:
			return float('nan')
		return max(0.0, tt - distance / self.desired_speed) / (distance / 1000.0)

	def mean_speed_kmh(self, section_length: float) -> float:
		tt = self.travel_time()
		distance = section_length - self.x_start
		if tt is None or tt <= 0:
			return float('nan')
		return distance / tt * 3.6

	def mean_deviation(self) -> float:
		return self.deviation_sum / self.samples if self.samples else 0.0


@dataclass(frozen=True)
class ClassMetrics:
	"""Means over the completed trips of one vehicle group."""

	vehicles: int
	mean_delay_s_per_km: Optional[float]
	mean_speed_kmh: Optional[float]
	mean_lane_changes: Optional[float]
	mean_speed_deviation_ms: Optional[float]
	mean_plans: Optional[float]

	@classmethod
	def from_trips(
		cls, trips: List[TripAccumulator], section_length: float, plans: bool
	) -> ClassMetrics:
		if not trips:
			return cls(0, None, None, None, None, None)

		def mean(values: Iterable[float]) -> float:
			return float(np.mean(list(values)))

		return cls(
			vehicles=len(trips),
			mean_delay_s_per_km=mean(t.delay_per_km(section_length) for t in trips),
			mean_speed_kmh=mean(t.mean_speed_kmh(section_length) for t in trips),
			mean_lane_changes=mean(t.lane_changes for t in trips),
			mean_speed_deviation_ms=mean(t.mean_deviation() for t in trips),
			mean_plans=mean(len(t.plan_ids) for t in trips) if plans else None,
		)

	def as_dict(self) -> Dict[str, Any]:
		return {
			'vehicles': self.vehicles,
			'mean_delay_s_per_km': self.mean_delay_s_per_km,
			'mean_speed_kmh': self.mean_speed_kmh,
			'mean_lane_changes': self.mean_lane_changes,
			'mean_speed_deviation_ms': self.mean_speed_deviation_ms,
			'mean_plans': self.mean_plans,
		}


@dataclass(frozen=True)
class MetricsReport:
	"""
	Indicators of one run.

	Attributes
	----------
	completed_vehicles : int
	    Vehicles that crossed the end of the section.
	classes : dict
	    ``all``, ``av`` and ``manual`` group metrics.
	safety_overrides : int
	    Plans created in safety-override mode.
	fallback_plans : int
	    Braking plans used after a planning failure.
	audit_violations : int
	    Safety violations found by the audit.
	timings_us : dict
	    Per-stage planning CPU time (``mean`` and ``max`` in microseconds);
	    kept out of :meth:`as_dict`, which must be reproducible.
	"""

	completed_vehicles: int
	classes: Dict[str, ClassMetrics]
	safety_overrides: int = 0
	fallback_plans: int = 0
	audit_violations: int = 0
	timings_us: Dict[str, Dict[str, float]] = field(default_factory=dict)

	@property
	def empty(self) -> bool:
		return self.completed_vehicles == 0

	def as_dict(self) -> Dict[str, Any]:
		return {
			'schema': SCHEMA,
			'version': SCHEMA_VERSION,
			'empty': self.empty,
			'completed_vehicles': self.completed_vehicles,
			'classes': {name: m.as_dict() for name, m in self.classes.items()},
			'safety_overrides': self.safety_overrides,
			'fallback_plans': self.fallback_plans,
			'audit_violations': self.audit_violations,
		}

	def to_json(self, path: Path) -> Path:
		path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=False) + '\n')
		return path

	@classmethod
	def from_json(cls, path: Path) -> MetricsReport:
		data = json.loads(path.read_text())
		if data.get('schema') != SCHEMA:
			msg = f'{path} is not a metrics file (schema={data.get("schema")!r}).'
			raise ValueError(msg)
		return cls(
			completed_vehicles=data['completed_vehicles'],
			classes={k: ClassMetrics(**v) for k, v in data['classes'].items()},
			safety_overrides=data['safety_overrides'],
			fallback_plans=data['fallback_plans'],
			audit_violations=data['audit_violations'],
		)

	def table_rows(self) -> List[List[str]]:
		"""One formatted row per vehicle group, matching :data:`TABLE_HEADERS`."""

		def fmt(value: Optional[float]) -> str:
			return 'N/A' if value is None else f'{value:.2f}'

		return [
			[
				name,
				str(m.vehicles),
				fmt(m.mean_delay_s_per_km),
				fmt(m.mean_speed_kmh),
				fmt(m.mean_lane_changes),
				fmt(m.mean_speed_deviation_ms),
				fmt(m.mean_plans),
			]
			for name, m in self.classes.items()
		]


class MetricsAccumulator:
	"""
	Collects what a run produced and turns it into a :class:`MetricsReport`.

	Parameters
	----------
	section_length : float
	    Length of the simulated section (m); a trip is complete once it
	    crosses it.
	"""

	def __init__(self, section_length: float) -> None:
		self.section_length = section_length
		self.trips: Dict[int, TripAccumulator] = {}
		self.plan_modes: Dict[int, str] = {}
		self.audit_violations = 0
		self._timings: Dict[str, List[int]] = {stage: [] for stage in STAGES}

	def add_row(self, row: Mapping[str, Any]) -> None:
		vid = int(row['id'])
		t, x, lane = float(row['t']), float(row['x']), int(row['lane'])
		trip = self.trips.get(vid)
		if trip is None:
			trip = TripAccumulator(
				vehicle_class=str(row['class']),
				desired_speed=float(row['v_d']),
				t_start=t,
				x_start=x,
				t_prev=t,
				x_prev=x,
				lane_prev=lane,
			)
			self.trips[vid] = trip
		trip.add(t, x, lane, float(row['v_x']), self.section_length)
		if not _missing(row.get('plan_id')):
			plan_id = int(row['plan_id'])
			trip.plan_ids.add(plan_id)
			self.plan_modes.setdefault(plan_id, str(row['plan_mode']))

	def add_plan(self, plan: Plan) -> None:
		for stage, value in plan.diagnostics.timings_us.items():
			self._timings.setdefault(stage, []).append(value)

	def record_step(self, record: StepRecord) -> None:
		"""Consume one simulation step."""
		for row in record.rows:
			self.add_row(row)
		for plan in record.plans:
			self.add_plan(plan)
		self.audit_violations += sum(1 for event in record.events if event.violation)

	def timing_stats(self) -> Dict[str, Dict[str, float]]:
		return {
			stage: {
				'mean': float(np.mean(values)),
				'max': float(np.max(values)),
				'plans': len(values),
			}
			for stage, values in self._timings.items()
			if values
		}

	def finalize(self) -> MetricsReport:
		"""Means over completed trips by vehicle class."""
		done = [t for _, t in sorted(self.trips.items()) if t.t_exit is not None]
		groups = {
			'all': done,
			'av': [t for t in done if t.automated],
			'manual': [t for t in done if not t.automated],
		}
		classes = {
			name: ClassMetrics.from_trips(trips, self.section_length, plans=name == 'av')
			for name, trips in groups.items()
		}
		modes = list(self.plan_modes.values())
		report = MetricsReport(
			completed_vehicles=len(done),
			classes=classes,
			safety_overrides=modes.count('override'),
			fallback_plans=modes.count('fallback'),
			audit_violations=self.audit_violations,
			timings_us=self.timing_stats(),
		)
		if report.empty:
			log.info('No vehicle completed the section, metrics are empty.')
		return report


def load_trace(path: Path) -> pd.DataFrame:
	"""Read ``trace.csv`` with exact float round-tripping."""
	return pd.read_csv(path, float_precision='round_trip', keep_default_na=True)


def metrics_from_trace(
	trace: pd.DataFrame,
	section_length: float,
	audit: Optional[pd.DataFrame] = None,
) -> MetricsReport:
	"""
	Rebuild a report from a trace table and, optionally, an audit table.

	Planning CPU times are not part of the trace and stay empty.
	"""
	accumulator = MetricsAccumulator(section_length)
	for row in trace.to_dict(orient='records'):
		accumulator.add_row(row)
	if audit is not None and not audit.empty:
		violations = audit['violation'].astype(str).str.lower() == 'true'
		accumulator.audit_violations = int(violations.sum())
	return accumulator.finalize()


def recompute(run_dir: Path, section_length: float) -> MetricsReport:
	"""Recompute the report of a run directory from its trace and audit files."""
	trace_path = run_dir / 'trace.csv'
	if not trace_path.exists():
		msg = f'No trace found in {run_dir}; the run was made with --no-trace.'
		raise FileNotFoundError(msg)
	audit_path = run_dir / 'audit.csv'
	audit = pd.read_csv(audit_path) if audit_path.exists() else None
	return metrics_from_trace(load_trace(trace_path), section_length, audit)
