"""Shared geometric and statistical types.

Frames are right-handed and z-up. Yaw is measured counter-clockwise from +x
and kept in (-pi, pi]. Time is a simulation clock in seconds starting at 0.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

TWO_PI = 2.0 * math.pi

AXES = ("x", "y", "z", "roll", "pitch", "yaw")


class _Unobserved:
    """Marker for a covariance entry that carries no information."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "UNOBSERVED"

    def __reduce__(self):
        return (_Unobserved, ())


UNOBSERVED = _Unobserved()


def normalize_yaw(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = float(a)
    if not math.isfinite(a):
        raise ValueError(f"yaw must be finite, got {a}")
    r = math.fmod(a, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    elif r > math.pi:
        r -= TWO_PI
    return r


def angle_diff(a: float, b: float) -> float:
    """Shortest signed angle a - b."""
    return normalize_yaw(a - b)


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class PointCloud:
    """Ordered batch of 3D points (N x 3 array) in a named frame."""

    frame_id: str
    stamp: float
    points: np.ndarray

    def __post_init__(self):
        if not self.frame_id:
            raise ValueError("frame_id must be non-empty")
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.frame_id, self.stamp, self.points[mask_or_index])


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"pose position must be finite, got ({self.x}, {self.y})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def compose_pose(parent: Pose2D, child_in_parent: Pose2D) -> Pose2D:
    """Express ``child_in_parent`` in the frame that ``parent`` lives in."""
    c, s = math.cos(parent.yaw), math.sin(parent.yaw)
    return Pose2D(
        parent.x + c * child_in_parent.x - s * child_in_parent.y,
        parent.y + s * child_in_parent.x + c * child_in_parent.y,
        parent.yaw + child_in_parent.yaw,
    )


def invert_pose(p: Pose2D) -> Pose2D:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2D(-c * p.x - s * p.y, s * p.x - c * p.y, -p.yaw)


def _check_sigma(name, v):
    if v is UNOBSERVED:
        return v
    v = float(v)
    if math.isinf(v) and v > 0:
        return UNOBSERVED
    if not math.isfinite(v) or v <= 0:
        raise ValueError(f"{name} must be finite and > 0 or UNOBSERVED, got {v}")
    return v


@dataclass(frozen=True)
class CovarianceSpec:
    """Per-axis standard deviations [x, y, z, roll, pitch, yaw].

    An entry of ``UNOBSERVED`` (or +inf on input) marks an axis the source
    does not measure.
    """

    sigma_x: object
    sigma_y: object
    sigma_z: object
    sigma_phi: object
    sigma_theta: object
    sigma_psi: object

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "sigma_z", "sigma_phi", "sigma_theta", "sigma_psi"):
            object.__setattr__(self, name, _check_sigma(name, getattr(self, name)))

    @classmethod
    def from_sequence(cls, xi) -> "CovarianceSpec":
        if len(xi) != 6:
            raise ValueError("covariance spec needs six entries")
        return cls(*xi)

    def as_tuple(self) -> tuple:
        return (self.sigma_x, self.sigma_y, self.sigma_z,
                self.sigma_phi, self.sigma_theta, self.sigma_psi)

    @property
    def mask(self) -> np.ndarray:
        return np.array([s is not UNOBSERVED for s in self.as_tuple()])


def covariance_matrix(spec: CovarianceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal covariance over the observed axes and the 6-element boolean mask."""
    mask = spec.mask
    sig = np.array([s for s in spec.as_tuple() if s is not UNOBSERVED], dtype=float)
    return np.diag(sig ** 2), mask


# Standard deviations used by the fusion filter for each source.
NDT_XI = (0.0225, 0.0225, 0.0225, 0.000625, 0.000625, 0.000625)
RSU_SIGMA_XY = {"VLP16": 0.01486, "VLP32C": 0.00681}


def ndt_covariance() -> CovarianceSpec:
    return CovarianceSpec.from_sequence(NDT_XI)


def rsu_covariance(model_id: str) -> CovarianceSpec:
    try:
        s = RSU_SIGMA_XY[model_id]
    except KeyError:
        raise ValueError(f"no RSU covariance for sensor model {model_id!r}") from None
    return CovarianceSpec(s, s, UNOBSERVED, UNOBSERVED, UNOBSERVED, UNOBSERVED)


@dataclass(frozen=True)
class VehicleSpec:
    length: float
    width: float
    height: float
    id: str = "ego"

    def __post_init__(self):
        if not (self.length >= self.width > 0):
            raise ValueError(f"need length >= width > 0, got {self.length} x {self.width}")
        if not self.height > 0:
            raise ValueError(f"height must be > 0, got {self.height}")


class Source(str, enum.Enum):
    RSU = "RSU"
    NDT = "NDT"


@dataclass(frozen=True)
class PoseMeasurement:
    pose: Pose2D
    cov: CovarianceSpec
    stamp: float
    source: Source
    diagnostics: Optional[dict] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.stamp >= 0:
            raise ValueError(f"stamp must be >= 0, got {self.stamp}")
        if self.source == Source.RSU and any(
            s is not UNOBSERVED for s in self.cov.as_tuple()[2:]
        ):
            raise ValueError("RSU measurements observe x and y only")
