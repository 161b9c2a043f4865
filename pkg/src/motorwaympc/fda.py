"""
fda.py

Feasible direction solver for the bound-constrained planning problem.

Descent directions are built from the projected reduced gradient with
Polak-Ribiere conjugate-gradient updates; a backtracking line search along the
projected path keeps every iterate inside the control bounds and strictly
decreases the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from motorwaympc.cost import CostContext, cost_and_gradient, total_cost
from motorwaympc.exceptions import LineSearchError, NonFiniteCostError
from motorwaympc.logging_config import logger as log
from motorwaympc.models.common import (
	ControlTrajectory,
	CostBreakdown,
	VehicleState,
)
from motorwaympc.models.config import SolverConfig


@dataclass(frozen=True, eq=False)
class SolveResult:
	"""
	Outcome of one solver run.

	Attributes
	----------
	controls : ControlTrajectory
	    Final (feasible) controls.
	states : np.ndarray
	    Rollout of ``controls``, shape ``(K + 1, 5)``.
	cost : float
	    Objective value of ``controls``.
	breakdown : CostBreakdown
	    Term-by-term objective value.
	cost_history : tuple of float
	    Objective value of the start point and of every accepted iterate.
	iterations : int
	    Number of accepted steps.
	converged : bool
	    Whether the projected-gradient norm reached the tolerance.
	stalled : bool
	    Whether the line search gave up before convergence.
	grad_norm : float
	    Final projected-gradient norm.
	"""

	controls: ControlTrajectory
	states: np.ndarray
	cost: float
	breakdown: CostBreakdown
	cost_history: Tuple[float, ...]
	iterations: int
	converged: bool
	stalled: bool = False
	grad_norm: float = float('nan')


@dataclass(frozen=True, eq=False)
class StepResult:
	"""Accepted line-search step: length, new controls and their cost."""

	alpha: float
	controls: np.ndarray
	cost: float


def project_controls(
	u: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> np.ndarray:
	"""Clamp every control to its bounds; idempotent."""
	return np.minimum(np.maximum(np.asarray(u, dtype=float), lower), upper)


def projected_gradient(
	u: np.ndarray, gradient: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> np.ndarray:
	"""
	Gradient with components that would push an active bound outward zeroed.

	A descent step moves along ``-gradient``, so a positive component at the
	lower bound or a negative one at the upper bound cannot be followed.
	"""
	blocked = ((u <= lower) & (gradient > 0)) | ((u >= upper) & (gradient < 0))
	return np.where(blocked, 0.0, gradient)


def line_search(
	evaluate: Callable[[np.ndarray], float],
	u: np.ndarray,
	direction: np.ndarray,
	cost: float,
	slope: float,
	cfg: SolverConfig,
	lower: Optional[np.ndarray] = None,
	upper: Optional[np.ndarray] = None,
	alpha: float = 1.0,
) -> StepResult:
	"""
	Armijo backtracking along the projected path ``P(u + alpha * direction)``.

	Parameters
	----------
	evaluate : Callable[[np.ndarray], float]
	    Objective function of the controls.
	u : np.ndarray
	    Current controls.
	direction : np.ndarray
	    Descent direction.
	cost : float
	    Objective value at ``u``.
	slope : float
	    Directional derivative ``gradient . direction``, must be negative.
	cfg : SolverConfig
	    Provides shrink factor, sufficient-decrease constant and minimum step.
	lower, upper : np.ndarray, optional
	    Bounds the trial points are projected onto.
	alpha : float
	    Initial step length.

	Returns
	-------
	StepResult
	    First step satisfying ``J(trial) <= cost + c1 * alpha * slope``.

	Raises
	------
	LineSearchError
	    If the step shrinks below ``cfg.min_step``.
	"""
	if not slope < 0:
		msg = f'Line search needs a descent direction, slope is {slope}.'
		raise LineSearchError(msg)
	while alpha >= cfg.min_step:
		trial = u + alpha * direction
		if lower is not None and upper is not None:
			trial = project_controls(trial, lower, upper)
		trial_cost = evaluate(trial)
		# non-finite trial costs fail the comparison and shrink the step
		if trial_cost <= cost + cfg.ls_c1 * alpha * slope and trial_cost < cost:
			return StepResult(alpha=alpha, controls=trial, cost=trial_cost)
		alpha *= cfg.ls_shrink
	msg = f'Step length fell below {cfg.min_step} without sufficient decrease.'
	raise LineSearchError(msg)


def solve(
	s0: VehicleState,
	u0: ControlTrajectory,
	problem: CostContext,
	cfg: SolverConfig,
) -> SolveResult:
	"""
	Minimize the objective over bounded controls starting from ``u0``.

	Parameters
	----------
	s0 : VehicleState
	    Initial state of the ego vehicle.
	u0 : ControlTrajectory
	    Initial guess; projected onto the bounds first.
	problem : CostContext
	    Objective definition and control bounds.
	cfg : SolverConfig
	    Iteration limit, tolerance and line-search settings.

	Returns
	-------
	SolveResult
	    Feasible controls with cost no larger than that of the start point.

	Raises
	------
	NonFiniteCostError
	    If the objective is not finite at the start point.
	"""
	horizon = u0.horizon
	dt = u0.dt
	lower = problem.lower(horizon)
	upper = problem.upper(horizon)
	x0 = s0.as_array()

	def evaluate(u: np.ndarray) -> float:
		return total_cost(x0, u, problem, dt).total

	u = project_controls(u0.values, lower, upper)
	breakdown, gradient, states = cost_and_gradient(x0, u, problem, dt)
	cost = breakdown.total
	if not np.isfinite(cost) or not np.all(np.isfinite(gradient)):
		msg = f'Objective is not finite at the initial guess (J={cost}).'
		raise NonFiniteCostError(msg)

	history = [cost]
	iterations = 0
	stalled = False
	pg_prev: Optional[np.ndarray] = None
	d_prev: Optional[np.ndarray] = None
	pg = projected_gradient(u, gradient, lower, upper)
	grad_norm = float(np.linalg.norm(pg))

	while grad_norm > cfg.grad_tol and iterations < cfg.max_iterations:
		restart = pg_prev is None or iterations % cfg.cg_restart == 0
		if restart:
			direction = -pg
		else:
			beta = float(np.sum(pg * (pg - pg_prev)) / np.sum(pg_prev * pg_prev))
			direction = -pg + max(beta, 0.0) * d_prev
			direction = projected_gradient(u, -direction, lower, upper) * -1.0
		slope = float(np.sum(gradient * direction))
		if slope >= 0:
			direction = -pg
			slope = float(np.sum(gradient * direction))

		try:
			step = line_search(
				evaluate, u, direction, cost, slope, cfg, lower=lower, upper=upper
			)
		except LineSearchError as lse:
			log.debug('Solver stalled after %d iterations: %s', iterations, lse)
			stalled = True
			break

		u = step.controls
		breakdown, gradient, states = cost_and_gradient(x0, u, problem, dt)
		cost = breakdown.total
		if not np.isfinite(cost) or not np.all(np.isfinite(gradient)):
			msg = f'Objective became non-finite at iteration {iterations + 1}.'
			raise NonFiniteCostError(msg)
		history.append(cost)
		iterations += 1
		pg_prev, d_prev = pg, direction
		pg = projected_gradient(u, gradient, lower, upper)
		grad_norm = float(np.linalg.norm(pg))

	return SolveResult(
		controls=ControlTrajectory(u, dt),
		states=states,
		cost=cost,
		breakdown=breakdown,
		cost_history=tuple(history),
		iterations=iterations,
		converged=grad_norm <= cfg.grad_tol,
		stalled=stalled,
		grad_norm=grad_norm,
	)
