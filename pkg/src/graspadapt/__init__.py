"""Calibration-free grasp alignment and skill adaptation in a kinematic simulator."""
from .se3 import IDENTITY, Pose, PoseError, SampleRange, compose, error_between, inverse, sample_displacement

__version__ = "0.1.0"

__all__ = [
    "IDENTITY",
    "Pose",
    "PoseError",
    "SampleRange",
    "compose",
    "error_between",
    "inverse",
    "sample_displacement",
]
