"""Safety filtering of cached manipulator trajectories with control barrier functions."""

__version__ = "0.1.0"
