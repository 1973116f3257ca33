"""Version information for Atlas Lab."""

__version__ = "0.3.0"
