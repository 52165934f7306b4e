"""Roadside LiDAR cooperative vehicle localization."""
from .core import (
    UNOBSERVED,
    CovarianceSpec,
    PointCloud,
    Point3,
    Pose2D,
    PoseMeasurement,
    Source,
    VehicleSpec,
    compose_pose,
    covariance_matrix,
    invert_pose,
    normalize_yaw,
)
from .scenario import ScenarioConfig, default_config, load_config, run_scenario

__all__ = [
    "UNOBSERVED", "CovarianceSpec", "PointCloud", "Point3", "Pose2D", "PoseMeasurement", "Source",
    "VehicleSpec", "compose_pose", "covariance_matrix", "invert_pose", "normalize_yaw",
    "ScenarioConfig", "default_config", "load_config", "run_scenario",
]
