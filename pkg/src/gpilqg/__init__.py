"""GP-corrected simulators with Robust-iLQG trajectory optimization."""

__version__ = "0.1.0"
