"""Joint learning of dynamics and constants of motion."""

__version__ = "0.1.0"
