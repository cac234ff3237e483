"""Cortical thickness from tissue partial-volume maps by stationary-velocity registration."""

__version__ = "0.1.0"
