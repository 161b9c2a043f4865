"""
kinematics.py

Discrete-time point-mass model of a vehicle on a straight road.

Controls (longitudinal jerk and lateral acceleration) are held constant over
each step, and the state update is the exact integral of the continuous-time
chain of integrators, so splitting a step into smaller ones with the same
controls gives the same result.
"""

from __future__ import annotations

import numpy as np

from motorwaympc.models.common import (
	ControlInput,
	ControlTrajectory,
	VehicleState,
)


def step_state(s: VehicleState, u: ControlInput, dt: float) -> VehicleState:
	"""
	Advance a state by one step of length ``dt`` under constant controls.

	Parameters
	----------
	s : VehicleState
	    State at the start of the step.
	u : ControlInput
	    Jerk and lateral acceleration applied during the step.
	dt : float
	    Step length (s), must be positive.

	Returns
	-------
	VehicleState
	    State at the end of the step.
	"""
	if dt <= 0:
		msg = f'Step length must be positive, got {dt}.'
		raise ValueError(msg)
	dt2 = dt * dt
	dt3 = dt2 * dt
	return VehicleState(
		x=s.x + s.v_x * dt + 0.5 * s.a_x * dt2 + u.j_x * dt3 / 6.0,
		y=s.y + s.v_y * dt + 0.5 * u.a_y * dt2,
		v_x=s.v_x + s.a_x * dt + 0.5 * u.j_x * dt2,
		v_y=s.v_y + u.a_y * dt,
		a_x=s.a_x + u.j_x * dt,
	)


def rollout_array(s0: np.ndarray, controls: np.ndarray, dt: float) -> np.ndarray:
	"""
	Vectorized rollout on raw arrays.

	Parameters
	----------
	s0 : np.ndarray
	    Initial state ``(x, y, v_x, v_y, a_x)``.
	controls : np.ndarray
	    Controls of shape ``(K, 2)``.
	dt : float
	    Step length (s).

	Returns
	-------
	np.ndarray
	    States of shape ``(K + 1, 5)``; row 0 is ``s0``.
	"""
	s0 = np.asarray(s0, dtype=float)
	controls = np.asarray(controls, dtype=float).reshape(-1, 2)
	horizon = controls.shape[0]
	j_x = controls[:, 0]
	a_y = controls[:, 1]
	dt2 = dt * dt
	dt3 = dt2 * dt

	states = np.empty((horizon + 1, 5))
	states[0] = s0

	# a_x and v_y are plain sums of the controls
	a_x = s0[4] + np.concatenate(([0.0], np.cumsum(j_x * dt)))
	v_y = s0[3] + np.concatenate(([0.0], np.cumsum(a_y * dt)))
	v_x = s0[2] + np.concatenate(([0.0], np.cumsum(a_x[:-1] * dt + 0.5 * j_x * dt2)))
	x = s0[0] + np.concatenate(
		([0.0], np.cumsum(v_x[:-1] * dt + 0.5 * a_x[:-1] * dt2 + j_x * dt3 / 6.0))
	)
	y = s0[1] + np.concatenate(([0.0], np.cumsum(v_y[:-1] * dt + 0.5 * a_y * dt2)))

	states[:, 0] = x
	states[:, 1] = y
	states[:, 2] = v_x
	states[:, 3] = v_y
	states[:, 4] = a_x
	return states


def rollout(s0: VehicleState, u: ControlTrajectory) -> np.ndarray:
	"""
	Roll a control trajectory out from ``s0``.

	Row ``k + 1`` equals ``step_state(row k, u[k], u.dt)`` up to rounding.

	Returns
	-------
	np.ndarray
	    States of shape ``(K + 1, 5)``, columns ``x, y, v_x, v_y, a_x``.
	"""
	return rollout_array(s0.as_array(), u.values, u.dt)


def rollout_states(s0: VehicleState, u: ControlTrajectory) -> list[VehicleState]:
	"""Same as ``rollout`` but as a list of ``VehicleState``."""
	return [VehicleState.from_array(row) for row in rollout(s0, u)]
