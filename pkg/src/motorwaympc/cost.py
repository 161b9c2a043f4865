"""
cost.py

Planning objective and its exact gradient with respect to the controls.

The objective sums, over the ``K`` steps of the horizon, squared jerk,
acceleration and lateral acceleration, squared deviations from the desired
speeds, a road-boundary penalty, one ellipse-shaped collision penalty per
obstacle and a smooth penalty on negative longitudinal speed.

The gradient is computed by a backward (adjoint) pass through the linear
dynamics of ``motorwaympc.kinematics``, so one evaluation costs about as much
as one cost evaluation regardless of the horizon length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from motorwaympc.kinematics import rollout_array
from motorwaympc.models.common import (
	ControlTrajectory,
	CostBreakdown,
	ObstaclePrediction,
	VehicleState,
)
from motorwaympc.models.config import (
	ControlBounds,
	DrivingGoals,
	RoadGeometry,
	Weights,
)

# |(dx + s) / (r_x / 2)| beyond this is treated as infinitely far
_RATIO_CLIP = 1e12


def road_penalty(y: float | np.ndarray, geometry: RoadGeometry) -> float | np.ndarray:
	"""
	Quadratic penalty for approaching the road edges.

	Zero for ``d <= y <= w - d``, ``(y - d)^2`` below and ``(y + d - w)^2``
	above, where ``d`` is the margin and ``w`` the road width.
	"""
	d = geometry.margin
	w = geometry.width
	y = np.asarray(y, dtype=float)
	value = np.where(y < d, (y - d) ** 2, np.where(y > w - d, (y + d - w) ** 2, 0.0))
	return float(value) if value.ndim == 0 else value


def road_penalty_grad(
	y: float | np.ndarray, geometry: RoadGeometry
) -> float | np.ndarray:
	"""Derivative of ``road_penalty`` with respect to ``y``."""
	d = geometry.margin
	w = geometry.width
	y = np.asarray(y, dtype=float)
	value = np.where(y < d, 2 * (y - d), np.where(y > w - d, 2 * (y + d - w), 0.0))
	return float(value) if value.ndim == 0 else value


def ellipse_params(
	v_x: float, v_i: float, omega: float, length_term: float
) -> Tuple[float, float]:
	"""
	Longitudinal size ``r_x`` and centre shift ``s`` of an obstacle ellipse.

	``r_x = omega * v_x + omega * v_i + L`` and ``s = omega * (v_x - v_i) / 2``.
	"""
	r_x = omega * v_x + omega * v_i + length_term
	s = omega * (v_x - v_i) / 2.0
	return r_x, s


def negative_speed_penalty(
	v_x: float | np.ndarray, epsilon: float
) -> float | np.ndarray:
	"""Smooth penalty ``-v + sqrt(v^2 + epsilon)``; strictly decreasing in ``v``."""
	v = np.asarray(v_x, dtype=float)
	value = -v + np.sqrt(v * v + epsilon)
	return float(value) if value.ndim == 0 else value


def negative_speed_penalty_grad(
	v_x: float | np.ndarray, epsilon: float
) -> float | np.ndarray:
	v = np.asarray(v_x, dtype=float)
	value = -1.0 + v / np.sqrt(v * v + epsilon)
	return float(value) if value.ndim == 0 else value


@dataclass(frozen=True, eq=False)
class ObstacleEllipse:
	"""
	Collision ellipse of one obstacle along the horizon.

	Attributes
	----------
	trajectory : np.ndarray
	    Predicted ``(x_i, y_i, v_i)`` per ego step, shape ``(>= K + 1, 3)``.
	length_term : float
	    ``L_i``, the mean of ego and obstacle lengths (m).
	omega : float
	    Time gap of the ego vehicle (s).
	r_y : float
	    Lateral size, the lane width (m).
	p1, p2 : int
	    Even exponents of the longitudinal and lateral terms.
	"""

	trajectory: np.ndarray
	length_term: float
	omega: float
	r_y: float
	p1: int = 18
	p2: int = 18
	vehicle_id: int = -1

	def __post_init__(self) -> None:
		traj = np.array(self.trajectory, dtype=float).reshape(-1, 3)
		traj.setflags(write=False)
		object.__setattr__(self, 'trajectory', traj)
		if self.length_term <= 0 or self.r_y <= 0 or self.omega < 0:
			msg = 'Ellipse needs length_term > 0, r_y > 0 and omega >= 0.'
			raise ValueError(msg)

	@classmethod
	def from_prediction(
		cls,
		prediction: ObstaclePrediction,
		ego_length: float,
		omega: float,
		geometry: RoadGeometry,
		weights: Weights,
	) -> ObstacleEllipse:
		return cls(
			trajectory=prediction.states,
			length_term=0.5 * (ego_length + prediction.length),
			omega=omega,
			r_y=geometry.lane_width,
			p1=weights.p1,
			p2=weights.p2,
			vehicle_id=prediction.vehicle_id,
		)


def collision_penalty(
	x: float, y: float, v_x: float, obstacle: ObstacleEllipse, k: int
) -> float:
	"""
	Ellipse penalty of ``obstacle`` at ego step ``k``, a value in ``(0, 1]``.

	Equals 1 at the shifted ellipse centre and 0.5 on its boundary.
	"""
	x_i, y_i, v_i = obstacle.trajectory[k]
	r_x, s = ellipse_params(v_x, v_i, obstacle.omega, obstacle.length_term)
	r_x = max(r_x, 0.5 * obstacle.length_term)
	ratio_x = float(np.clip((x - x_i + s) / (0.5 * r_x), -_RATIO_CLIP, _RATIO_CLIP))
	ratio_y = float(np.clip((y - y_i) / (0.5 * obstacle.r_y), -_RATIO_CLIP, _RATIO_CLIP))
	return 1.0 / (ratio_x**obstacle.p1 + ratio_y**obstacle.p2 + 1.0)


@dataclass(frozen=True, eq=False)
class CostContext:
	"""
	Everything besides the initial state and controls that defines the objective.

	Attributes
	----------
	obstacles : tuple of ObstacleEllipse
	    Obstacles inside the planning zone.
	goals : DrivingGoals
	    Desired speeds of the ego vehicle.
	weights : Weights
	    Penalty weights.
	geometry : RoadGeometry
	    Road layout.
	bounds : ControlBounds
	    Control box bounds.
	fixed_lateral : np.ndarray, optional
	    When set, the lateral acceleration of every step is pinned to these
	    values (lower and upper bound coincide).
	"""

	obstacles: Tuple[ObstacleEllipse, ...]
	goals: DrivingGoals
	weights: Weights
	geometry: RoadGeometry
	bounds: ControlBounds = field(default_factory=ControlBounds)
	fixed_lateral: Optional[np.ndarray] = None

	def __post_init__(self) -> None:
		obstacles = tuple(self.obstacles)
		object.__setattr__(self, 'obstacles', obstacles)
		if obstacles:
			steps = min(o.trajectory.shape[0] for o in obstacles)
			traj = np.stack([o.trajectory[:steps] for o in obstacles])
			params = np.array(
				[[o.length_term, o.omega, o.r_y, o.p1, o.p2] for o in obstacles],
				dtype=float,
			)
		else:
			traj = np.zeros((0, 0, 3))
			params = np.zeros((0, 5))
		object.__setattr__(self, '_traj', traj)
		object.__setattr__(self, '_params', params)

	def lower(self, horizon: int) -> np.ndarray:
		lo = self.bounds.lower(horizon)
		if self.fixed_lateral is not None:
			lo[:, 1] = np.asarray(self.fixed_lateral, dtype=float)[:horizon]
		return lo

	def upper(self, horizon: int) -> np.ndarray:
		hi = self.bounds.upper(horizon)
		if self.fixed_lateral is not None:
			hi[:, 1] = np.asarray(self.fixed_lateral, dtype=float)[:horizon]
		return hi

	def obstacle_arrays(self, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
		"""Stacked trajectories ``(N, horizon, 3)`` and parameters ``(N, 5)``."""
		traj: np.ndarray = self._traj  # type: ignore[attr-defined]
		if traj.shape[0] and traj.shape[1] < horizon:
			msg = (
				f'Obstacle predictions cover {traj.shape[1]} steps, '
				f'the horizon needs {horizon}.'
			)
			raise ValueError(msg)
		return traj[:, :horizon], self._params  # type: ignore[attr-defined]


@dataclass(frozen=True)
class _CollisionTerms:
	value: np.ndarray  # (N, K) penalty values
	d_x: np.ndarray
	d_y: np.ndarray
	d_vx: np.ndarray


def _collision_terms(states: np.ndarray, ctx: CostContext) -> _CollisionTerms:
	"""Penalties and their partial derivatives for states ``0..K-1``."""
	horizon = states.shape[0]
	traj, params = ctx.obstacle_arrays(horizon)
	if traj.shape[0] == 0:
		empty = np.zeros((0, horizon))
		return _CollisionTerms(empty, empty, empty, empty)

	x = states[:, 0][None, :]
	y = states[:, 1][None, :]
	v = states[:, 2][None, :]
	length_term = params[:, 0:1]
	omega = params[:, 1:2]
	r_y = params[:, 2:3]
	p1 = params[:, 3:4]
	p2 = params[:, 4:5]

	r_x = omega * v + omega * traj[:, :, 2] + length_term
	floored = r_x < 0.5 * length_term
	r_x = np.where(floored, 0.5 * length_term, r_x)
	s = omega * (v - traj[:, :, 2]) / 2.0

	ratio_x = 2.0 * (x - traj[:, :, 0] + s) / r_x
	ratio_y = 2.0 * (y - traj[:, :, 1]) / r_y
	clip_x = np.abs(ratio_x) > _RATIO_CLIP
	clip_y = np.abs(ratio_y) > _RATIO_CLIP
	ratio_x = np.clip(ratio_x, -_RATIO_CLIP, _RATIO_CLIP)
	ratio_y = np.clip(ratio_y, -_RATIO_CLIP, _RATIO_CLIP)

	denom = ratio_x**p1 + ratio_y**p2 + 1.0
	value = 1.0 / denom
	# dc/dr = -p r^(p-1) / denom^2, grouped to avoid underflow of denom^2
	dc_dx_ratio = np.where(clip_x, 0.0, -p1 * (ratio_x ** (p1 - 1) / denom) * value)
	dc_dy_ratio = np.where(clip_y, 0.0, -p2 * (ratio_y ** (p2 - 1) / denom) * value)

	dratio_dv = np.where(floored, omega / r_x, omega * (1.0 - ratio_x) / r_x)
	return _CollisionTerms(
		value=value,
		d_x=dc_dx_ratio * 2.0 / r_x,
		d_y=dc_dy_ratio * 2.0 / r_y,
		d_vx=dc_dx_ratio * dratio_dv,
	)


def _breakdown(
	states: np.ndarray, controls: np.ndarray, ctx: CostContext, collision: np.ndarray
) -> CostBreakdown:
	w = ctx.weights
	g = ctx.goals
	body = states[:-1]
	return CostBreakdown(
		jerk=float(w.w1 * np.sum(controls[:, 0] ** 2)),
		acceleration=float(w.w2 * np.sum(body[:, 4] ** 2)),
		lateral_acceleration=float(w.w3 * np.sum(controls[:, 1] ** 2)),
		speed=float(w.w4 * np.sum((body[:, 2] - g.v_dx) ** 2)),
		lateral_speed=float(w.w5 * np.sum((body[:, 3] - g.v_dy) ** 2)),
		road=float(w.w6 * np.sum(road_penalty(body[:, 1], ctx.geometry))),
		collision=float(w.w7 * np.sum(collision)),
		negative_speed=float(
			w.w8 * np.sum(negative_speed_penalty(body[:, 2], w.epsilon))
		),
	)


def total_cost(
	s0: VehicleState | np.ndarray,
	u: ControlTrajectory | np.ndarray,
	ctx: CostContext,
	dt: Optional[float] = None,
) -> CostBreakdown:
	"""
	Evaluate the objective term by term.

	Parameters
	----------
	s0 : VehicleState or np.ndarray
	    Initial state.
	u : ControlTrajectory or np.ndarray
	    Controls; a raw ``(K, 2)`` array needs ``dt``.
	ctx : CostContext
	    Obstacles, goals, weights and geometry.
	dt : float, optional
	    Step length when ``u`` is a raw array.

	Returns
	-------
	CostBreakdown
	    Weighted terms; ``.total`` is the objective value.
	"""
	s0_arr, controls, step = _unpack(s0, u, dt)
	states = rollout_array(s0_arr, controls, step)
	terms = _collision_terms(states[:-1], ctx)
	return _breakdown(states, controls, ctx, terms.value)


def cost_and_gradient(
	s0: VehicleState | np.ndarray,
	u: ControlTrajectory | np.ndarray,
	ctx: CostContext,
	dt: Optional[float] = None,
) -> Tuple[CostBreakdown, np.ndarray, np.ndarray]:
	"""
	Objective, reduced gradient and rollout in one pass.

	Returns
	-------
	tuple
	    ``(breakdown, gradient, states)`` with gradient of shape ``(K, 2)``
	    (columns ``dJ/dj_x``, ``dJ/da_y``) and states of shape ``(K + 1, 5)``.
	"""
	s0_arr, controls, step = _unpack(s0, u, dt)
	states = rollout_array(s0_arr, controls, step)
	body = states[:-1]
	terms = _collision_terms(body, ctx)
	breakdown = _breakdown(states, controls, ctx, terms.value)

	w = ctx.weights
	g = ctx.goals
	# partial derivatives of the stage cost with respect to each state
	g_x = w.w7 * terms.d_x.sum(axis=0)
	g_y = w.w6 * road_penalty_grad(body[:, 1], ctx.geometry) + w.w7 * terms.d_y.sum(
		axis=0
	)
	g_vx = (
		2.0 * w.w4 * (body[:, 2] - g.v_dx)
		+ w.w8 * negative_speed_penalty_grad(body[:, 2], w.epsilon)
		+ w.w7 * terms.d_vx.sum(axis=0)
	)
	g_vy = 2.0 * w.w5 * (body[:, 3] - g.v_dy)
	g_ax = 2.0 * w.w2 * body[:, 4]

	stage = [g.tolist() for g in (g_x, g_y, g_vx, g_vy, g_ax)]
	gradient = _adjoint(controls, step, w, *stage)
	return breakdown, gradient, states


def reduced_gradient(
	s0: VehicleState | np.ndarray,
	u: ControlTrajectory | np.ndarray,
	ctx: CostContext,
	dt: Optional[float] = None,
) -> np.ndarray:
	"""Gradient of ``total_cost`` with respect to every control, shape ``(K, 2)``."""
	return cost_and_gradient(s0, u, ctx, dt)[1]


def _adjoint(
	controls: np.ndarray,
	dt: float,
	weights: Weights,
	g_x: Sequence[float],
	g_y: Sequence[float],
	g_vx: Sequence[float],
	g_vy: Sequence[float],
	g_ax: Sequence[float],
) -> np.ndarray:
	"""
	Backward pass of the costate through the dynamics.

	``lam`` holds dJ/ds(k + 1) when control ``k`` is processed. The terminal
	state does not enter the objective, so the recursion starts from zero.
	"""
	horizon = controls.shape[0]
	dt2 = dt * dt
	dt3 = dt2 * dt
	gradient = np.empty((horizon, 2))
	l_x = l_y = l_vx = l_vy = l_ax = 0.0
	j_x = controls[:, 0].tolist()
	a_y = controls[:, 1].tolist()
	for k in range(horizon - 1, -1, -1):
		gradient[k, 0] = (
			2.0 * weights.w1 * j_x[k] + l_x * dt3 / 6.0 + l_vx * dt2 / 2.0 + l_ax * dt
		)
		gradient[k, 1] = 2.0 * weights.w3 * a_y[k] + l_y * dt2 / 2.0 + l_vy * dt
		if k == 0:
			break
		l_x, l_y, l_vx, l_vy, l_ax = (
			g_x[k] + l_x,
			g_y[k] + l_y,
			g_vx[k] + dt * l_x + l_vx,
			g_vy[k] + dt * l_y + l_vy,
			g_ax[k] + 0.5 * dt2 * l_x + dt * l_vx + l_ax,
		)
	return gradient


def _unpack(
	s0: VehicleState | np.ndarray,
	u: ControlTrajectory | np.ndarray,
	dt: Optional[float],
) -> Tuple[np.ndarray, np.ndarray, float]:
	s0_arr = s0.as_array() if isinstance(s0, VehicleState) else np.asarray(s0, float)
	if isinstance(u, ControlTrajectory):
		return s0_arr, np.asarray(u.values), u.dt
	if dt is None:
		msg = 'A step length is required when controls are a raw array.'
		raise ValueError(msg)
	return s0_arr, np.asarray(u, dtype=float).reshape(-1, 2), dt
