from __future__ import annotations

import asyncio
import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import IO, Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from rich.console import Console
from rich.progress import (
	BarColumn,
	Progress,
	TimeElapsedColumn,
	TimeRemainingColumn,
)
from rich.table import Table

from motorwaympc.cache import ResultCache, cell_key
from motorwaympc.logging_config import logger as log
from motorwaympc.metrics import STAGES, TABLE_HEADERS, MetricsAccumulator, MetricsReport
from motorwaympc.models.common import Plan
from motorwaympc.models.config import ScenarioConfig
from motorwaympc.simworld import AUDIT_COLUMNS, TRACE_COLUMNS, Simulation, StepRecord

MODES = ('connected', 'non-connected')

KPIS = (
	'mean_delay_s_per_km',
	'mean_speed_kmh',
	'mean_lane_changes',
	'mean_speed_deviation_ms',
	'mean_plans',
)


class TablePrinter:
	"""Handles table rendering for run and sweep results using Rich."""

	def __init__(self, title: str, headers: List[str]) -> None:
		self.title = title
		self.headers = headers

	@property
	def color_list(self) -> List[str]:
		"""Simple list of colors for use in Rich."""
		return ['bold white', 'magenta', 'cyan', 'green', 'yellow', 'red', 'blue']

	def print_table(self, items: List[Any], row_generator: Callable) -> None:
		"""
		Prints a table of items.

		Parameters
		----------
		items : List[Any]
				A list of result items.
		row_generator : callable
				A function to generate rows from items.
		"""
		console = Console()
		table = Table(title=self.title)

		for i, header in enumerate(self.headers):
			table.add_column(
				header,
				justify='left',
				style=self.color_list[i % len(self.color_list)],
				no_wrap=True,
			)

		for item in items:
			table.add_row(*row_generator(item))

		console.print(table)


def print_report(report: MetricsReport, title: str = 'Run metrics') -> None:
	"""Print a metrics report as a table followed by its safety counters."""
	TablePrinter(title, headers=TABLE_HEADERS).print_table(
		report.table_rows(), row_generator=lambda row: row
	)
	Console().print(
		f'safety overrides: {report.safety_overrides}, '
		f'fallback plans: {report.fallback_plans}, '
		f'audit violations: [bold]{report.audit_violations}[/]'
	)


def plan_record(plan: Plan) -> Dict[str, Any]:
	"""Diagnostic record of one plan, one line of ``plans.jsonl``."""
	d = plan.diagnostics
	return {
		'vehicle_id': plan.vehicle_id,
		'plan_id': plan.plan_id,
		't': plan.created_at,
		'trigger': plan.trigger.value,
		'mode': plan.mode.value,
		'dp_cost': d.dp_cost,
		'fda_cost': d.fda_cost,
		'initial_cost': d.initial_cost,
		'iterations': d.iterations,
		'converged': d.converged,
		'dp_feasible': d.dp_feasible,
		'safety_mode': plan.safety_mode,
		'fallback': plan.mode.value == 'fallback',
		'timings_us': d.timings_us,
	}


def _json_float(value: Any) -> Any:
	if isinstance(value, float) and value != value:
		return None
	return value


class RunWriter:
	"""
	Streams the per-step output of a run into its directory.

	``trace.csv`` is only written when ``trace`` is set; audit events and plan
	diagnostics are always written.
	"""

	def __init__(self, run_dir: Path, trace: bool = True) -> None:
		self.run_dir = run_dir
		self.trace = trace
		self._files: List[IO[str]] = []
		self._trace: Optional[csv.DictWriter] = None
		self._audit: Optional[csv.DictWriter] = None
		self._plans: Optional[IO[str]] = None

	def __enter__(self) -> RunWriter:
		self.run_dir.mkdir(parents=True, exist_ok=True)
		if self.trace:
			self._trace = self._open_csv('trace.csv', TRACE_COLUMNS)
		self._audit = self._open_csv('audit.csv', AUDIT_COLUMNS)
		self._plans = (self.run_dir / 'plans.jsonl').open('w')
		self._files.append(self._plans)
		return self

	def __exit__(self, *exc: object) -> None:
		for f in self._files:
			f.close()
		self._files.clear()

	def _open_csv(self, name: str, columns: Sequence[str]) -> csv.DictWriter:
		f = (self.run_dir / name).open('w', newline='')
		self._files.append(f)
		writer = csv.DictWriter(f, fieldnames=list(columns), lineterminator='\n')
		writer.writeheader()
		return writer

	def write(self, record: StepRecord) -> None:
		if self._trace is not None:
			self._trace.writerows(record.rows)
		if self._audit is not None:
			self._audit.writerows(event.as_row() for event in record.events)
		if self._plans is not None:
			for plan in record.plans:
				entry = {k: _json_float(v) for k, v in plan_record(plan).items()}
				self._plans.write(json.dumps(entry) + '\n')


@dataclass(frozen=True)
class RunResult:
	"""Outcome of one simulation run."""

	seed: int
	report: MetricsReport
	run_dir: Optional[Path] = None

	@property
	def violations(self) -> int:
		return self.report.audit_violations


def simulate(
	config: ScenarioConfig,
	seed: int,
	on_step: Optional[Callable[[StepRecord], None]] = None,
) -> MetricsReport:
	"""Run one simulation and return its metrics."""
	simulation = Simulation(config, seed=seed)
	accumulator = MetricsAccumulator(config.road.section_length)

	def step(record: StepRecord) -> None:
		accumulator.record_step(record)
		if on_step is not None:
			on_step(record)

	simulation.run(config.duration, on_step=step)
	return accumulator.finalize()


def timestamped_dir(root: Path, prefix: str) -> Path:
	"""A new directory ``<root>/<prefix>-YYYYmmdd-HHMMSS`` (suffixed if taken)."""
	stamp = datetime.now().strftime('%Y%m%d-%H%M%S')
	candidate = root / f'{prefix}-{stamp}'
	n = 1
	while candidate.exists():
		candidate = root / f'{prefix}-{stamp}-{n}'
		n += 1
	candidate.mkdir(parents=True)
	return candidate


@dataclass
class ScenarioManager:
	"""Runs single scenarios and writes their results."""

	config: ScenarioConfig

	def run(self, seed: Optional[int] = None, run_dir: Optional[Path] = None) -> RunResult:
		"""
		Simulate one seed and write trace, audit, plans, metrics and timings.

		Parameters
		----------
		seed : int, optional
		    Seed to run; defaults to the first configured seed.
		run_dir : Path, optional
		    Output directory; defaults to a new timestamped directory under
		    ``config.output_dir``.
		"""
		if seed is None:
			seed = self.config.seeds[0]
			if len(self.config.seeds) > 1:
				log.warning(
					'Running seed %d only; use the sweep command for several seeds.', seed
				)
		if run_dir is None:
			run_dir = timestamped_dir(Path(self.config.output_dir), 'run')
		run_dir.mkdir(parents=True, exist_ok=True)

		effective = self.config.with_overrides({'seeds': [seed]})
		effective.to_yaml(run_dir / 'effective_config.yaml')
		log.info('[bold magenta]run:[/] writing results to %s', run_dir)

		with RunWriter(run_dir, trace=self.config.trace) as writer:
			report = simulate(effective, seed, on_step=writer.write)

		report.to_json(run_dir / 'metrics.json')
		timings = {stage: report.timings_us.get(stage) for stage in STAGES}
		(run_dir / 'timings.json').write_text(json.dumps(timings, indent=2) + '\n')
		return RunResult(seed=seed, report=report, run_dir=run_dir)


def flatten_report(report: MetricsReport) -> Dict[str, Any]:
	"""One flat mapping of a report, a row of ``cells.csv``."""
	row: Dict[str, Any] = {
		'completed_vehicles': report.completed_vehicles,
		'safety_overrides': report.safety_overrides,
		'fallback_plans': report.fallback_plans,
		'audit_violations': report.audit_violations,
	}
	for name, metrics in report.classes.items():
		row[f'{name}_vehicles'] = metrics.vehicles
		values = metrics.as_dict()
		for kpi in KPIS:
			row[f'{name}_{kpi}'] = values[kpi]
	return row


def run_cell(
	config_data: Dict[str, Any], penetration: float, mode: str, seed: int
) -> Dict[str, Any]:
	"""Simulate one sweep cell; runs in a worker process."""
	config = ScenarioConfig.from_dict(config_data).with_overrides(
		{'spawn.penetration': penetration, 'spawn.connectivity': mode}
	)
	return flatten_report(simulate(config, seed))


def aggregate_cells(cells: pd.DataFrame) -> pd.DataFrame:
	"""
	Seed-averaged indicators per (penetration, mode).

	Failed cells do not enter the means; their seeds are listed in
	``failed_seeds``.
	"""
	keys = ['penetration', 'mode']
	if 'error' not in cells.columns:
		cells = cells.assign(error=None)
	failed = cells['error'].notna()
	ok = cells[~failed]
	value_columns = [c for c in cells.columns if c not in (*keys, 'seed', 'error')]
	table = (
		ok.groupby(keys, sort=True)[value_columns]
		.mean(numeric_only=True)
		.reindex(cells.groupby(keys, sort=True).size().index)
	)
	seeds = ok.groupby(keys)['seed'].count().reindex(table.index)
	table['seeds'] = seeds.fillna(0).astype(int)
	failed_by_cell = cells[failed].groupby(keys)['seed']
	names = {k: ' '.join(str(s) for s in v) for k, v in failed_by_cell}
	table['failed_seeds'] = [names.get(idx, '') for idx in table.index]
	return table.reset_index()


@dataclass
class SweepManager:
	"""
	Runs the cross product of penetration rates, modes and seeds.

	Cells are cached by configuration digest, penetration, mode and seed, and
	run in parallel processes.
	"""

	config: ScenarioConfig
	penetrations: Sequence[float]
	modes: Sequence[str] = MODES
	seeds: Optional[Sequence[int]] = None
	jobs: int = 1
	force: bool = False
	cache: ResultCache = field(default_factory=ResultCache)

	def __post_init__(self) -> None:
		if self.seeds is None:
			self.seeds = tuple(self.config.seeds)
		for mode in self.modes:
			if mode not in MODES:
				msg = f'Unknown mode {mode!r}; expected one of {", ".join(MODES)}.'
				raise ValueError(msg)

	def cells(self) -> List[Tuple[float, str, int]]:
		assert self.seeds is not None
		return [(p, m, s) for p in self.penetrations for m in self.modes for s in self.seeds]

	def _key(self, penetration: float, mode: str, seed: int) -> str:
		return cell_key(penetration, mode, seed, self.config.digest())

	async def _run_cell(
		self,
		pool: ProcessPoolExecutor,
		cell: Tuple[float, str, int],
		progress: Progress,
		task: Any,
	) -> Dict[str, Any]:
		penetration, mode, seed = cell
		row: Dict[str, Any] = {'penetration': penetration, 'mode': mode, 'seed': seed}
		key = self._key(penetration, mode, seed)
		if not self.force and (cached := self.cache.get(key)):
			progress.update(task, advance=1)
			return {**row, **cached}
		loop = asyncio.get_running_loop()
		try:
			result = await loop.run_in_executor(
				pool, run_cell, self.config.to_dict(), penetration, mode, seed
			)
		except Exception as e:  # noqa: BLE001
			log.error('[bold magenta]%s:[/] cell failed: %s', key, e)
			row['error'] = str(e)
		else:
			self.cache.put(key, result)
			row.update(result)
		progress.update(task, advance=1)
		return row

	async def _run_all(self) -> List[Dict[str, Any]]:
		cells = self.cells()
		with Progress(
			'[progress.description]{task.description}',
			BarColumn(),
			'[progress.percentage]{task.percentage:>3.0f}%',
			'Time elapsed:',
			TimeElapsedColumn(),
			'Time remaining:',
			TimeRemainingColumn(compact=True),
			transient=True,
		) as progress:
			task = progress.add_task('[cyan]Simulating sweep cells...', total=len(cells))
			with ProcessPoolExecutor(max_workers=self.jobs) as pool:
				return await asyncio.gather(
					*[self._run_cell(pool, cell, progress, task) for cell in cells]
				)

	def run(self, out_dir: Optional[Path] = None) -> pd.DataFrame:
		"""Run (or load) every cell, write ``cells.csv`` and ``sweep.csv``."""
		rows = asyncio.run(self._run_all())
		cells = pd.DataFrame(rows)
		table = aggregate_cells(cells)
		if out_dir is None:
			out_dir = timestamped_dir(Path(self.config.output_dir), 'sweep')
		out_dir.mkdir(parents=True, exist_ok=True)
		self.config.to_yaml(out_dir / 'effective_config.yaml')
		cells.to_csv(out_dir / 'cells.csv', index=False)
		table.to_csv(out_dir / 'sweep.csv', index=False)
		log.info('[bold magenta]sweep:[/] %d cells written to %s', len(cells), out_dir)
		return table

	@staticmethod
	def print(table: pd.DataFrame, title: str = 'Sweep') -> None:
		"""Print the seed-averaged headline indicators."""
		columns = [
			'penetration',
			'mode',
			'seeds',
			'all_mean_delay_s_per_km',
			'all_mean_speed_kmh',
			'all_mean_lane_changes',
			'av_mean_plans',
		]
		present = [c for c in columns if c in table.columns]

		def fmt(value: Any) -> str:
			if isinstance(value, float):
				return 'N/A' if value != value else f'{value:.2f}'
			return str(value)

		printer = TablePrinter(title, headers=present)
		printer.print_table(
			table[present].to_dict(orient='records'),
			row_generator=lambda item: [fmt(item[c]) for c in present],
		)
