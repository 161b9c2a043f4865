"""Optimization-based MPC path planning for automated motorway vehicles."""

from importlib.metadata import version

__version__ = version('motorway-mpc')

__all__ = ['__version__']
