"""Late-fusion action prediction for robot-arm trajectories, built on a small numpy network core."""

__version__ = "0.1.0"
