"""
config.py

Scenario configuration: one frozen dataclass per section of the YAML file.

Every section derives from ``ConfigSection``, which handles conversion from
and to plain dictionaries, rejects unknown keys and reports invalid values
with their dotted key path (``planner.horizon: must be >= 2``). Defaults are
the values used in the motorway experiments, so an empty file is a valid
scenario.

Classes:
    ConfigSection: Base class with dictionary conversion and a rich summary.
    RoadGeometry: Lane layout and section length.
    Weights: Penalty weights of the planning objective.
    DrivingGoals: Desired longitudinal and lateral speed of one vehicle.
    ControlBounds: Box bounds on jerk and lateral acceleration.
    SolverConfig: Feasible direction solver settings.
    DPConfig: Coarse dynamic programming grid and weights.
    PlannerParams: Horizon, obstacle zone, safety override and replanning.
    ManualDriverParams: Car-following and lane-changing model of manual drivers.
    SpawnConfig: Demand and vehicle attribute ranges.
    ScenarioConfig: A complete scenario.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Dict, Mapping, Optional, Tuple, Type, TypeVar

import numpy as np
import yaml
from rich.console import Console
from rich.table import Table

from motorwaympc.exceptions import ConfigError

# Type variable for subclasses of ConfigSection
T = TypeVar('T', bound='ConfigSection')

CONNECTIVITY_MODES: Tuple[str, ...] = ('connected', 'non-connected')
DP_METHODS: Tuple[str, ...] = ('forward', 'backward', 'both')


def _coerce(key_path: str, value: Any, default: Any) -> Any:  # noqa: ANN401
	"""Convert a YAML value to the type of the field default."""
	if isinstance(default, bool):
		if not isinstance(value, bool):
			raise ConfigError(key_path, f'expected true/false, got {value!r}')
		return value
	if isinstance(default, int):
		if isinstance(value, bool) or not isinstance(value, int):
			raise ConfigError(key_path, f'expected an integer, got {value!r}')
		return value
	if isinstance(default, float):
		if isinstance(value, bool) or not isinstance(value, (int, float)):
			raise ConfigError(key_path, f'expected a number, got {value!r}')
		return float(value)
	if isinstance(default, str):
		if not isinstance(value, str):
			raise ConfigError(key_path, f'expected a string, got {value!r}')
		return value
	if isinstance(default, tuple):
		if not isinstance(value, (list, tuple)):
			raise ConfigError(key_path, f'expected a list, got {value!r}')
		if not default:
			return tuple(value)
		return tuple(
			_coerce(f'{key_path}[{i}]', item, default[0]) for i, item in enumerate(value)
		)
	return value


@dataclass(frozen=True)
class ConfigSection:
	"""
	Base class for configuration sections.

	Subclasses set ``section`` to their key in the scenario file and override
	``validate`` to check value ranges.
	"""

	section: ClassVar[str] = ''

	def __post_init__(self) -> None:
		self.validate()

	def validate(self) -> None:
		"""Check value ranges; raise ConfigError on the first violation."""

	def _require(self, condition: bool, key: str, message: str) -> None:
		if not condition:
			raise ConfigError(f'{self.section}.{key}' if self.section else key, message)

	@classmethod
	def from_dict(cls: Type[T], data: Optional[Mapping[str, Any]]) -> T:
		"""
		Create a section from a mapping, typically a parsed YAML block.

		Parameters
		----------
		data : Mapping[str, Any] or None
		    Values to set; missing keys keep their defaults.

		Returns
		-------
		T
		    An instance of the implementing subclass.

		Raises
		------
		ConfigError
		    On unknown keys, wrongly typed values or out-of-range values.
		"""
		data = data or {}
		if not isinstance(data, Mapping):
			raise ConfigError(cls.section, f'expected a mapping, got {data!r}')
		defaults = cls()
		known = {f.name for f in dataclasses.fields(cls)}
		unknown = sorted(set(data) - known)
		if unknown:
			prefix = f'{cls.section}.' if cls.section else ''
			raise ConfigError(
				f'{prefix}{unknown[0]}',
				f'unknown key (valid keys: {", ".join(sorted(known))})',
			)
		values = {
			key: _coerce(
				f'{cls.section}.{key}' if cls.section else key,
				value,
				getattr(defaults, key),
			)
			for key, value in data.items()
		}
		return cls(**values)

	def to_dict(self) -> Dict[str, Any]:
		"""Plain-Python representation that ``from_dict`` reads back unchanged."""
		return {
			f.name: list(getattr(self, f.name))
			if isinstance(getattr(self, f.name), tuple)
			else getattr(self, f.name)
			for f in dataclasses.fields(self)
		}

	def print_summary(self, title: str | None = None) -> None:
		"""Print the section values as a rich table."""
		table = Table(title=title if title else f'{self.__class__.__name__} Summary')

		table.add_column('Field', style='bold cyan', no_wrap=True)
		table.add_column('Value', style='magenta')

		for key, value in self.to_dict().items():
			table.add_row(key, str(value))

		console = Console()
		console.print(table)


@dataclass(frozen=True)
class RoadGeometry(ConfigSection):
	"""
	Straight multi-lane motorway section.

	Attributes
	----------
	lane_width : float
	    Lane width ``W`` (m).
	n_lanes : int
	    Number of lanes; the road width is ``n_lanes * lane_width``.
	margin : float
	    Boundary margin ``d`` of the road penalty (m).
	section_length : float
	    Length of the simulated section (m).
	"""

	section: ClassVar[str] = 'road'

	lane_width: float = 3.0
	n_lanes: int = 3
	margin: float = 1.4
	section_length: float = 3000.0

	def validate(self) -> None:
		self._require(self.lane_width > 0, 'lane_width', 'must be > 0')
		self._require(self.n_lanes >= 1, 'n_lanes', 'must be >= 1')
		self._require(
			0 < self.margin < self.lane_width, 'margin', 'must satisfy 0 < margin < lane_width'
		)
		self._require(self.section_length > 0, 'section_length', 'must be > 0')

	@property
	def width(self) -> float:
		return self.n_lanes * self.lane_width

	def lane_center(self, lane: int) -> float:
		return (lane + 0.5) * self.lane_width


@dataclass(frozen=True)
class Weights(ConfigSection):
	"""
	Penalty weights of the objective.

	``w1`` jerk, ``w2`` acceleration, ``w3`` lateral acceleration, ``w4`` speed
	deviation, ``w5`` lateral speed deviation, ``w6`` road boundaries, ``w7``
	collision ellipses, ``w8`` negative speed. ``epsilon`` smooths the negative
	speed term and ``p1``/``p2`` are the even exponents of the ellipses.
	"""

	section: ClassVar[str] = 'weights'

	w1: float = 1.5
	w2: float = 1.0
	w3: float = 1.5
	w4: float = 0.05
	w5: float = 1.0
	w6: float = 15.0
	w7: float = 15.0
	w8: float = 1.0
	epsilon: float = 0.1
	p1: int = 18
	p2: int = 18

	def validate(self) -> None:
		for name in ('w1', 'w2', 'w3', 'w4', 'w5', 'w6', 'w7', 'w8'):
			self._require(getattr(self, name) >= 0, name, 'must be >= 0')
		self._require(self.epsilon > 0, 'epsilon', 'must be > 0')
		for name in ('p1', 'p2'):
			value = getattr(self, name)
			self._require(value > 0 and value % 2 == 0, name, 'must be a positive even integer')


@dataclass(frozen=True)
class DrivingGoals:
	"""Desired longitudinal speed ``v_dx`` and lateral speed ``v_dy`` (m/s)."""

	v_dx: float
	v_dy: float = 0.0

	def __post_init__(self) -> None:
		if not self.v_dx >= 0:
			msg = f'Desired speed must be non-negative, got {self.v_dx}.'
			raise ValueError(msg)


@dataclass(frozen=True)
class ControlBounds(ConfigSection):
	"""Box bounds on the controls: jerk (m/s^3) and lateral acceleration (m/s^2)."""

	section: ClassVar[str] = 'bounds'

	j_min: float = -4.0
	j_max: float = 4.0
	a_y_min: float = -1.5
	a_y_max: float = 1.5

	def validate(self) -> None:
		self._require(self.j_min < self.j_max, 'j_min', 'must be < j_max')
		self._require(self.a_y_min < self.a_y_max, 'a_y_min', 'must be < a_y_max')
		self._require(self.j_min <= 0 <= self.j_max, 'j_max', 'bounds must contain 0')
		self._require(
			self.a_y_min <= 0 <= self.a_y_max, 'a_y_max', 'bounds must contain 0'
		)

	def lower(self, horizon: int) -> np.ndarray:
		"""Per-step lower bounds, shape ``(horizon, 2)``."""
		return np.tile([self.j_min, self.a_y_min], (horizon, 1)).astype(float)

	def upper(self, horizon: int) -> np.ndarray:
		"""Per-step upper bounds, shape ``(horizon, 2)``."""
		return np.tile([self.j_max, self.a_y_max], (horizon, 1)).astype(float)


@dataclass(frozen=True)
class SolverConfig(ConfigSection):
	"""
	Feasible direction solver settings.

	Attributes
	----------
	max_iterations : int
	    Iteration limit.
	grad_tol : float
	    Convergence threshold on the projected-gradient norm.
	ls_shrink : float
	    Backtracking factor of the line search.
	ls_c1 : float
	    Sufficient-decrease constant.
	cg_restart : int
	    Conjugate-gradient restart period (iterations).
	min_step : float
	    Smallest step length before the line search gives up.
	"""

	section: ClassVar[str] = 'solver'

	max_iterations: int = 50
	grad_tol: float = 1e-3
	ls_shrink: float = 0.5
	ls_c1: float = 1e-4
	cg_restart: int = 10
	min_step: float = 1e-12

	def validate(self) -> None:
		self._require(self.max_iterations >= 1, 'max_iterations', 'must be >= 1')
		self._require(self.grad_tol > 0, 'grad_tol', 'must be > 0')
		self._require(0 < self.ls_shrink < 1, 'ls_shrink', 'must be in (0, 1)')
		self._require(0 < self.ls_c1 < 1, 'ls_c1', 'must be in (0, 1)')
		self._require(self.cg_restart >= 1, 'cg_restart', 'must be >= 1')
		self._require(0 < self.min_step < 1, 'min_step', 'must be in (0, 1)')


@dataclass(frozen=True)
class DPConfig(ConfigSection):
	"""
	Coarse dynamic programming problem used to seed the solver.

	Attributes
	----------
	step : float
	    Coarse step ``T_dp`` (s).
	horizon_steps : int
	    Coarse horizon ``K_dp``.
	accel_set : tuple of float
	    Admissible longitudinal accelerations (m/s^2).
	lat_set : tuple of int
	    Admissible lane moves per step.
	max_lane_changes : int
	    Lane changes allowed per horizon.
	weights : tuple of float
	    Weights of squared acceleration, lane move and speed deviation.
	speed_step : float
	    Speed grid increment (m/s).
	position_step : float
	    Position grid increment (m).
	lane_change_duration : float
	    Duration ``tau`` of the lateral pulse that executes a lane change (s).
	"""

	section: ClassVar[str] = 'dp'

	step: float = 1.0
	horizon_steps: int = 8
	accel_set: Tuple[float, ...] = (-3.0, 0.0, 3.0)
	lat_set: Tuple[int, ...] = (-1, 0, 1)
	max_lane_changes: int = 1
	weights: Tuple[float, ...] = (1.0, 1.0, 0.05)
	speed_step: float = 3.0
	position_step: float = 1.5
	lane_change_duration: float = 3.0

	def validate(self) -> None:
		self._require(self.step > 0, 'step', 'must be > 0')
		self._require(self.horizon_steps >= 1, 'horizon_steps', 'must be >= 1')
		self._require(len(self.accel_set) > 0, 'accel_set', 'must not be empty')
		self._require(
			set(self.lat_set) <= {-1, 0, 1} and 0 in self.lat_set,
			'lat_set',
			'must be a subset of [-1, 0, 1] containing 0',
		)
		self._require(self.max_lane_changes >= 0, 'max_lane_changes', 'must be >= 0')
		self._require(
			len(self.weights) == 3 and all(w >= 0 for w in self.weights),
			'weights',
			'must be three non-negative numbers',
		)
		self._require(self.speed_step > 0, 'speed_step', 'must be > 0')
		self._require(self.position_step > 0, 'position_step', 'must be > 0')
		self._require(self.lane_change_duration > 0, 'lane_change_duration', 'must be > 0')


@dataclass(frozen=True)
class PlannerParams(ConfigSection):
	"""
	MPC settings of the automated vehicles.

	Attributes
	----------
	horizon : int
	    Planning horizon ``K`` (steps).
	step : float
	    Planning step ``T`` (s); also the simulation step.
	zone_ahead, zone_behind : float
	    Obstacle zone, as multiples of ``v_dx * K * T``.
	override_speed_factor : float
	    Safety override desired speed as a fraction of the leader's speed.
	override_horizon_factor : float
	    Safety override horizon as a fraction of ``K``.
	replan_speed_threshold : float
	    Speed deviation of an obstacle from its prediction that triggers a replan (m/s).
	safety_threshold : float
	    Collision penalty above which a planned path is unsafe.
	dp_method : str
	    ``forward`` (branch-and-bound), ``backward`` or ``both``.
	"""

	section: ClassVar[str] = 'planner'

	horizon: int = 32
	step: float = 0.25
	zone_ahead: float = 1.0
	zone_behind: float = 0.5
	override_speed_factor: float = 0.95
	override_horizon_factor: float = 0.5
	replan_speed_threshold: float = 1.0
	safety_threshold: float = 0.5
	dp_method: str = 'forward'

	def validate(self) -> None:
		self._require(self.horizon >= 2, 'horizon', 'must be >= 2')
		self._require(self.step > 0, 'step', 'must be > 0')
		self._require(self.zone_ahead >= 0, 'zone_ahead', 'must be >= 0')
		self._require(self.zone_behind >= 0, 'zone_behind', 'must be >= 0')
		for name in ('override_speed_factor', 'override_horizon_factor'):
			self._require(0 < getattr(self, name) <= 1, name, 'must be in (0, 1]')
		self._require(
			self.replan_speed_threshold > 0, 'replan_speed_threshold', 'must be > 0'
		)
		self._require(0 < self.safety_threshold < 1, 'safety_threshold', 'must be in (0, 1)')
		self._require(
			self.dp_method in DP_METHODS,
			'dp_method',
			f'must be one of {", ".join(DP_METHODS)}',
		)

	@property
	def horizon_time(self) -> float:
		return self.horizon * self.step

	@property
	def override_horizon(self) -> int:
		return max(1, int(round(self.horizon * self.override_horizon_factor)))


@dataclass(frozen=True)
class ManualDriverParams(ConfigSection):
	"""
	Manual driver model: IDM car following with gap-acceptance lane changes.

	Desired speed and time gap come from each vehicle's sampled attributes.
	"""

	section: ClassVar[str] = 'driver'

	a_max: float = 1.5
	b_comf: float = 2.0
	s0_jam: float = 2.0
	delta: float = 4.0
	safe_decel: float = 3.0
	incentive: float = 0.2
	cooldown: float = 3.0
	emergency_decel: float = 9.0

	def validate(self) -> None:
		for name in (
			'a_max',
			'b_comf',
			's0_jam',
			'delta',
			'safe_decel',
			'emergency_decel',
		):
			self._require(getattr(self, name) > 0, name, 'must be > 0')
		self._require(self.incentive >= 0, 'incentive', 'must be >= 0')
		self._require(self.cooldown >= 0, 'cooldown', 'must be >= 0')


@dataclass(frozen=True)
class SpawnConfig(ConfigSection):
	"""
	Traffic demand and the ranges vehicle attributes are drawn from.

	Attributes
	----------
	inflow : float
	    Arrival rate (veh/h).
	penetration : float
	    Fraction of automated vehicles.
	connectivity : str
	    ``connected`` or ``non-connected``; applies to all automated vehicles.
	speed_range_kmh : tuple of float
	    Desired speed range (km/h), sampled uniformly.
	time_gap_range : tuple of float
	    Time gap range (s), sampled uniformly.
	length_range : tuple of float
	    Vehicle length range (m), sampled uniformly.
	"""

	section: ClassVar[str] = 'spawn'

	inflow: float = 3000.0
	penetration: float = 0.5
	connectivity: str = 'connected'
	speed_range_kmh: Tuple[float, ...] = (80.0, 120.0)
	time_gap_range: Tuple[float, ...] = (0.8, 1.8)
	length_range: Tuple[float, ...] = (4.0, 5.0)

	def validate(self) -> None:
		self._require(self.inflow >= 0, 'inflow', 'must be >= 0')
		self._require(0 <= self.penetration <= 1, 'penetration', 'must be in [0, 1]')
		self._require(
			self.connectivity in CONNECTIVITY_MODES,
			'connectivity',
			f'must be one of {", ".join(CONNECTIVITY_MODES)}',
		)
		for name in ('speed_range_kmh', 'time_gap_range', 'length_range'):
			rng = getattr(self, name)
			self._require(
				len(rng) == 2 and 0 < rng[0] < rng[1],
				name,
				'must be [low, high] with 0 < low < high',
			)


@dataclass(frozen=True)
class ScenarioConfig(ConfigSection):
	"""
	A complete scenario: all sections plus run-level settings.

	Attributes
	----------
	duration : float
	    Simulated time (s).
	seeds : tuple of int
	    Random seeds; ``run`` uses the first, ``sweep`` all of them.
	output_dir : str
	    Directory under which timestamped result directories are created.
	trace : bool
	    Whether the per-step trace file is written.
	workers : int
	    Planner threads per simulation step.
	"""

	spawn: SpawnConfig = field(default_factory=SpawnConfig)
	road: RoadGeometry = field(default_factory=RoadGeometry)
	planner: PlannerParams = field(default_factory=PlannerParams)
	weights: Weights = field(default_factory=Weights)
	solver: SolverConfig = field(default_factory=SolverConfig)
	dp: DPConfig = field(default_factory=DPConfig)
	driver: ManualDriverParams = field(default_factory=ManualDriverParams)
	bounds: ControlBounds = field(default_factory=ControlBounds)
	duration: float = 3600.0
	seeds: Tuple[int, ...] = (0,)
	output_dir: str = 'results'
	trace: bool = True
	workers: int = 1

	SECTIONS: ClassVar[Dict[str, Type[ConfigSection]]] = {
		'spawn': SpawnConfig,
		'road': RoadGeometry,
		'planner': PlannerParams,
		'weights': Weights,
		'solver': SolverConfig,
		'dp': DPConfig,
		'driver': ManualDriverParams,
		'bounds': ControlBounds,
	}

	def validate(self) -> None:
		self._require(self.duration >= 0, 'duration', 'must be >= 0')
		self._require(len(self.seeds) >= 1, 'seeds', 'must list at least one seed')
		self._require(self.workers >= 1, 'workers', 'must be >= 1')
		coarse = self.dp.step * self.dp.horizon_steps
		self._require(
			abs(coarse - self.planner.horizon_time) < 1e-9,
			'dp.horizon_steps',
			f'coarse horizon {coarse} s must equal the planning horizon '
			f'{self.planner.horizon_time} s',
		)
		tau = self.dp.lane_change_duration
		self._require(
			4 * self.road.lane_width / tau**2 <= self.bounds.a_y_max + 1e-12,
			'dp.lane_change_duration',
			'lane change pulse 4 W / tau^2 exceeds bounds.a_y_max',
		)
		self._require(
			tau <= self.planner.horizon_time,
			'dp.lane_change_duration',
			'must not exceed the planning horizon',
		)

	@classmethod
	def from_dict(cls, data: Optional[Mapping[str, Any]]) -> ScenarioConfig:
		data = data or {}
		if not isinstance(data, Mapping):
			raise ConfigError('', f'scenario must be a mapping, got {data!r}')
		defaults = cls()
		known = {f.name for f in dataclasses.fields(cls)}
		unknown = sorted(set(data) - known)
		if unknown:
			raise ConfigError(
				unknown[0], f'unknown key (valid keys: {", ".join(sorted(known))})'
			)
		values: Dict[str, Any] = {}
		for key, value in data.items():
			if key in cls.SECTIONS:
				values[key] = cls.SECTIONS[key].from_dict(value)
			else:
				values[key] = _coerce(key, value, getattr(defaults, key))
		return cls(**values)

	def to_dict(self) -> Dict[str, Any]:
		out: Dict[str, Any] = {}
		for f in dataclasses.fields(self):
			value = getattr(self, f.name)
			if isinstance(value, ConfigSection):
				out[f.name] = value.to_dict()
			elif isinstance(value, tuple):
				out[f.name] = list(value)
			else:
				out[f.name] = value
		return out

	@classmethod
	def from_yaml(cls, path: Path) -> ScenarioConfig:
		"""Load a scenario file; an empty file gives the default scenario."""
		try:
			with path.open('r') as f:
				data = yaml.safe_load(f)
		except yaml.YAMLError as ye:
			raise ConfigError('', f'cannot parse {path}: {ye}') from ye
		return cls.from_dict(data)

	def to_yaml(self, path: Optional[Path] = None) -> str:
		"""Serialize to YAML; also writes ``path`` when given."""
		text = yaml.safe_dump(self.to_dict(), sort_keys=False)
		if path is not None:
			path.write_text(text)
		return text

	def with_overrides(self, overrides: Mapping[str, Any]) -> ScenarioConfig:
		"""
		Return a copy with dotted keys replaced, e.g. ``{'planner.horizon': 16}``.

		Raises
		------
		ConfigError
		    If a key does not exist or a value is invalid.
		"""
		data = self.to_dict()
		for dotted, value in overrides.items():
			parts = dotted.split('.')
			target = data
			for depth, part in enumerate(parts[:-1]):
				if part not in target or not isinstance(target[part], dict):
					raise ConfigError('.'.join(parts[: depth + 1]), 'unknown section')
				target = target[part]
			if parts[-1] not in target:
				raise ConfigError(dotted, 'unknown key')
			target[parts[-1]] = value
		return ScenarioConfig.from_dict(data)

	def digest(self) -> str:
		"""Stable hash of the behavior-relevant settings."""
		data = self.to_dict()
		for key in ('output_dir', 'trace', 'workers', 'seeds'):
			data.pop(key)
		payload = json.dumps(data, sort_keys=True)
		return hashlib.sha256(payload.encode()).hexdigest()[:16]

	def print_summary(self, title: str | None = None) -> None:
		table = Table(title=title if title else 'Scenario Summary')

		table.add_column('Key', style='bold cyan', no_wrap=True)
		table.add_column('Value', style='magenta')

		for key, value in self.to_dict().items():
			if isinstance(value, dict):
				for sub, sub_value in value.items():
					table.add_row(f'{key}.{sub}', str(sub_value))
			else:
				table.add_row(key, str(value))

		console = Console()
		console.print(table)


def parse_override(item: str) -> Tuple[str, Any]:
	"""
	Split a ``section.key=value`` CLI override; the value is read as YAML.

	Raises
	------
	ConfigError
	    If there is no ``=``.
	"""
	if '=' not in item:
		raise ConfigError(item, 'override must look like section.key=value')
	key, raw = item.split('=', 1)
	try:
		value = yaml.safe_load(raw)
	except yaml.YAMLError as ye:
		raise ConfigError(key, f'cannot parse value {raw!r}') from ye
	return key.strip(), value
