"""
exceptions.py

Exception hierarchy shared by the solver, planner, simulator and CLI.

Classes:
    MotorwayMPCError: Root of all package errors.
    NonFiniteCostError: An optimizer iterate produced a non-finite cost.
    LineSearchError: The line search step length underflowed.
    NoFeasiblePlanError: Every coarse DP trajectory is infeasible.
    PlanningFailureError: Neither the normal nor the override plan is safe.
    ConfigError: A scenario file or CLI override is invalid.
"""

from __future__ import annotations


class MotorwayMPCError(Exception):
	"""Base class for errors raised by motorwaympc."""


class NonFiniteCostError(MotorwayMPCError):
	"""Raised when the objective evaluates to NaN or infinity."""


class LineSearchError(MotorwayMPCError):
	"""Raised when backtracking shrinks the step below the minimum length."""


class NoFeasiblePlanError(MotorwayMPCError):
	"""Raised when the coarse DP problem has no feasible trajectory."""


class PlanningFailureError(MotorwayMPCError):
	"""Raised when planning fails even after the safety override."""


class ConfigError(MotorwayMPCError, ValueError):
	"""
	Raised for invalid scenario configuration.

	Attributes
	----------
	key_path : str
	    Dotted path of the offending key, e.g. ``planner.horizon``.
	"""

	def __init__(self, key_path: str, message: str) -> None:
		self.key_path = key_path
		super().__init__(f'{key_path}: {message}' if key_path else message)
