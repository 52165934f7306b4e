"""Roadside pose estimation.

Background subtraction against a vehicle-free reference scan, low-point
selection, search-based L-shape fitting and dimension-based refinement
anchored at the rectangle corner nearest the sensor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    PointCloud,
    PoseMeasurement,
    Pose2D,
    Source,
    VehicleSpec,
    compose_pose,
    invert_pose,
    normalize_yaw,
    rsu_covariance,
)

HALF_PI = math.pi / 2

MATCH_THRESHOLD = 0.15
ROI_RADIUS = 10.0
HEIGHT_CUTOFF = 0.8
POINT_CAP = 500
MIN_POINTS = 10
ANGLE_STEP = math.radians(1.0)
COLLINEAR_TOL = 1e-6
AXIS_GATE = math.radians(30.0)
POSITION_GATE = 1.0


class DegenerateInput(ValueError):
    pass


class BackgroundIndex:
    """Exact nearest-neighbor index over a vehicle-free reference scan."""

    def __init__(self, reference: PointCloud):
        if len(reference) == 0:
            raise ValueError("reference scan is empty")
        self.frame_id = reference.frame_id
        self._tree = cKDTree(np.array(reference.points))

    def nearest_distance(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[0] == 0:
            return np.empty(0)
        d, _ = self._tree.query(pts, k=1)
        return d


def build_background_index(reference: PointCloud) -> BackgroundIndex:
    return BackgroundIndex(reference)


def filter_foreground(index: BackgroundIndex, current: PointCloud, roi_center, roi_radius: float,
                      match_threshold: float = MATCH_THRESHOLD) -> PointCloud:
    """Points inside the horizontal ROI that have no reference point within the threshold.

    Everything outside the ROI is treated as background without a lookup.
    """
    if not roi_radius > 0 or not match_threshold > 0:
        raise ValueError("roi_radius and match_threshold must be > 0")
    pts = current.points
    cx, cy = float(roi_center[0]), float(roi_center[1])
    in_roi = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) <= roi_radius
    idx = np.flatnonzero(in_roi)
    nn = index.nearest_distance(pts[idx])
    return current.subset(idx[nn > match_threshold])


def select_lfa_points(fg: PointCloud, ground_z: float, height_cutoff: float = HEIGHT_CUTOFF,
                      cap: int = POINT_CAP, min_points: int = MIN_POINTS) -> Optional[np.ndarray]:
    """Low points projected to the plane, or None when too few survive.

    Keeps points less than ``height_cutoff`` above ground; above ``cap`` the
    lowest ones win, ties broken by input order.
    """
    pts = fg.points
    h = pts[:, 2] - ground_z
    keep = np.flatnonzero(h < height_cutoff)
    if keep.size > cap:
        order = np.argsort(h[keep], kind="stable")[:cap]
        keep = np.sort(keep[order])
    if keep.size < min_points:
        return None
    return pts[keep, :2].copy()


@dataclass(frozen=True)
class OrientedRect:
    center: tuple
    heading: float
    extent_e1: float
    extent_e2: float

    def __post_init__(self):
        if not (self.extent_e1 > 0 and self.extent_e2 > 0):
            raise ValueError(f"rectangle extents must be > 0: {self.extent_e1}, {self.extent_e2}")
        if not 0.0 <= self.heading < HALF_PI:
            raise ValueError(f"heading must be in [0, pi/2), got {self.heading}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([c, s]), np.array([-s, c])


# Corner i sits at center + s1 * e1 * a1 / 2 + s2 * e2 * a2 / 2.
_CORNER_SIGNS = ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0))


def corners(rect: OrientedRect) -> np.ndarray:
    e1, e2 = rect.axes
    c = np.asarray(rect.center)
    return np.array([c + s1 * e1 * rect.extent_e1 / 2 + s2 * e2 * rect.extent_e2 / 2
                     for s1, s2 in _CORNER_SIGNS])


def is_collinear(points2d, tol: float = COLLINEAR_TOL) -> bool:
    p = np.asarray(points2d, dtype=float)
    if p.shape[0] < 3:
        return True
    q = p - p.mean(axis=0)
    sv = np.linalg.svd(q, compute_uv=False)
    return sv[-1] / math.sqrt(p.shape[0]) <= tol


def lshape_criterion(points2d: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """Closeness-to-edge variance score for each candidate heading (lower is better).

    Each point is attributed to whichever axis has the nearer rectangle edge;
    the score is the sum of the variances of those edge distances.
    """
    c, s = np.cos(thetas), np.sin(thetas)
    c1 = points2d[:, :1] * c + points2d[:, 1:] * s
    c2 = -points2d[:, :1] * s + points2d[:, 1:] * c
    d1 = np.minimum(c1.max(axis=0) - c1, c1 - c1.min(axis=0))
    d2 = np.minimum(c2.max(axis=0) - c2, c2 - c2.min(axis=0))
    return _masked_var(d1, d1 < d2) + _masked_var(d2, d2 < d1)


def _masked_var(d: np.ndarray, m: np.ndarray) -> np.ndarray:
    n = m.sum(axis=0)
    safe_n = np.maximum(n, 1)
    mean = np.where(m, d, 0.0).sum(axis=0) / safe_n
    var = np.where(m, (d - mean) ** 2, 0.0).sum(axis=0) / safe_n
    return np.where(n > 0, var, 0.0)


def _bounds_at(points2d: np.ndarray, theta: float):
    c, s = math.cos(theta), math.sin(theta)
    e1, e2 = np.array([c, s]), np.array([-s, c])
    p1, p2 = points2d @ e1, points2d @ e2
    lo1, hi1, lo2, hi2 = p1.min(), p1.max(), p2.min(), p2.max()
    center = e1 * (lo1 + hi1) / 2 + e2 * (lo2 + hi2) / 2
    return center, hi1 - lo1, hi2 - lo2


def fit_lshape(points2d, angle_step: float = ANGLE_STEP) -> OrientedRect:
    """Search-based rectangle fit over headings in [0, pi/2)."""
    p = np.asarray(points2d, dtype=float).reshape(-1, 2)
    if is_collinear(p):
        raise DegenerateInput("L-shape fit needs at least 3 non-collinear points")
    n = int(math.ceil(HALF_PI / angle_step - 1e-9))
    thetas = np.arange(n) * angle_step
    # Center the cloud so projections stay well conditioned far from the origin.
    origin = p.mean(axis=0)
    q = p - origin
    score = lshape_criterion(q, thetas)
    theta = float(thetas[int(np.argmin(score))])
    center, a1, a2 = _bounds_at(q, theta)
    return OrientedRect(center + origin, theta, a1, a2)


def fit_segment(points2d, sensor_xy, thickness: float = 1e-6) -> OrientedRect:
    """Rectangle for a flat (I-shaped) silhouette.

    The rectangle is a thin sliver whose near edge is the observed face, so
    the corner nearest the sensor lies on that face.
    """
    p = np.asarray(points2d, dtype=float)
    origin = p.mean(axis=0)
    q = p - origin
    _, _, vt = np.linalg.svd(q, full_matrices=False)
    direction = vt[0]
    theta = math.atan2(direction[1], direction[0]) % HALF_PI
    if theta >= HALF_PI:
        theta = 0.0
    center, a1, a2 = _bounds_at(q, theta)
    e2 = np.array([-math.sin(theta), math.cos(theta)])
    e1 = np.array([math.cos(theta), math.sin(theta)])
    across = e2 if a1 >= a2 else e1
    center = center + origin
    if np.dot(center - np.asarray(sensor_xy, dtype=float), across) < 0:
        across = -across
    center = center + across * thickness / 2
    if a1 >= a2:
        return OrientedRect(center, theta, max(a1, thickness), thickness)
    return OrientedRect(center, theta, thickness, max(a2, thickness))


def select_alignment_point(rect: OrientedRect, sensor_xy) -> tuple[np.ndarray, int]:
    """Corner nearest the sensor; ties go to the lowest corner index."""
    k = corners(rect)
    d2 = ((k - np.asarray(sensor_xy, dtype=float)) ** 2).sum(axis=1)
    i = int(np.argmin(d2))
    return k[i], i


def assign_dimensions(rect: OrientedRect, spec: VehicleSpec) -> bool:
    """True when the vehicle length belongs on the rectangle's e1 axis."""
    L, W = spec.length, spec.width
    straight = abs(rect.extent_e1 - L) + abs(rect.extent_e2 - W)
    swapped = abs(rect.extent_e1 - W) + abs(rect.extent_e2 - L)
    if straight != swapped:
        return straight < swapped
    return rect.extent_e1 >= rect.extent_e2


def refine_with_dimensions(rect: OrientedRect, spec: VehicleSpec, alignment,
                           prev_heading: Optional[float] = None) -> Pose2D:
    """Pose of the true-size box anchored at the alignment corner.

    The box keeps the fitted heading and grows from the anchor in the same
    inward directions as the fitted rectangle.
    """
    anchor, idx = alignment
    s1, s2 = _CORNER_SIGNS[idx]
    e1, e2 = rect.axes
    length_on_e1 = assign_dimensions(rect, spec)
    d1, d2 = (spec.length, spec.width) if length_on_e1 else (spec.width, spec.length)
    center = np.asarray(anchor, dtype=float) - s1 * e1 * d1 / 2 - s2 * e2 * d2 / 2
    return Pose2D(center[0], center[1], _oriented_yaw(rect, length_on_e1, prev_heading))


def refine_segment(rect: OrientedRect, spec: VehicleSpec, sensor_xy,
                   prev_heading: Optional[float] = None) -> tuple[Pose2D, np.ndarray]:
    """Pose for a flat silhouette from ``fit_segment``.

    A side-on view shows both ends of one face, so the face midpoint anchors
    the along-face position and the box extends away from the sensor.
    Returns the pose and the anchor point.
    """
    e1, e2 = rect.axes
    along_e1 = rect.extent_e1 >= rect.extent_e2
    across = e2 if along_e1 else e1
    c = np.asarray(rect.center, dtype=float)
    if np.dot(c - np.asarray(sensor_xy, dtype=float), across) < 0:
        across = -across
    thin = rect.extent_e2 if along_e1 else rect.extent_e1
    anchor = c - across * thin / 2
    length_on_e1 = assign_dimensions(rect, spec)
    d1, d2 = (spec.length, spec.width) if length_on_e1 else (spec.width, spec.length)
    center = anchor + across * (d2 if along_e1 else d1) / 2
    return Pose2D(center[0], center[1], _oriented_yaw(rect, length_on_e1, prev_heading)), anchor


def _oriented_yaw(rect: OrientedRect, length_on_e1: bool, prev_heading: Optional[float]) -> float:
    yaw = rect.heading if length_on_e1 else rect.heading + HALF_PI
    if prev_heading is not None:
        flipped = yaw + math.pi
        if abs(normalize_yaw(flipped - prev_heading)) < abs(normalize_yaw(yaw - prev_heading)):
            yaw = flipped
    return yaw


@dataclass(frozen=True)
class RsuMeasurement(PoseMeasurement):
    alignment_corner: Optional[tuple] = None
    raw_rect: Optional[OrientedRect] = None
    lfa_point_count: int = 0


@dataclass(frozen=True)
class RsuContext:
    """Read-only state of one roadside unit."""

    index: BackgroundIndex
    mount: Pose2D
    mount_height: float
    vehicle: VehicleSpec
    model_id: str
    effective_range: float
    ground_z: float = 0.0
    roi_radius: float = ROI_RADIUS
    match_threshold: float = MATCH_THRESHOLD
    height_cutoff: float = HEIGHT_CUTOFF
    point_cap: int = POINT_CAP
    min_points: int = MIN_POINTS
    angle_step: float = ANGLE_STEP
    road_heading: Optional[float] = None
    axis_gate: Optional[float] = AXIS_GATE
    position_gate: Optional[float] = POSITION_GATE


def estimate_vehicle_pose(frame: PointCloud, ctx: RsuContext, ref_position: Optional[Pose2D] = None,
                          prev_heading: Optional[float] = None) -> Optional[RsuMeasurement]:
    """Map-frame pose of the vehicle from one sensor-frame sweep, or None.

    ``ref_position`` (map frame) centers the background-filter ROI; without it
    the whole effective range is searched. ``prev_heading`` resolves the
    front/back ambiguity, falling back to the configured road heading. Fits
    whose long axis strays more than ``axis_gate`` from that hint, or whose
    center lands more than ``position_gate`` from ``ref_position``, are
    dropped.
    """
    if ref_position is not None:
        if ref_position.distance_to(ctx.mount) > ctx.effective_range:
            return None
        ref_local = compose_pose(invert_pose(ctx.mount), ref_position)
        roi_center, roi_radius = (ref_local.x, ref_local.y), ctx.roi_radius
    else:
        roi_center, roi_radius = (0.0, 0.0), ctx.effective_range

    fg = filter_foreground(ctx.index, frame, roi_center, roi_radius, ctx.match_threshold)
    # ground sits mount_height below the sensor origin
    pts = select_lfa_points(fg, -ctx.mount_height, ctx.height_cutoff, ctx.point_cap, ctx.min_points)
    if pts is None:
        return None

    sensor_xy = (0.0, 0.0)
    hint = prev_heading if prev_heading is not None else ctx.road_heading
    local_hint = None if hint is None else hint - ctx.mount.yaw
    if is_collinear(pts):
        rect = fit_segment(pts, sensor_xy)
        local, corner = refine_segment(rect, ctx.vehicle, sensor_xy, local_hint)
    else:
        rect = fit_lshape(pts, ctx.angle_step)
        corner, idx = select_alignment_point(rect, sensor_xy)
        local = refine_with_dimensions(rect, ctx.vehicle, (corner, idx), local_hint)
    if ctx.axis_gate is not None and local_hint is not None:
        # partial views can put the length on the wrong axis; drop those fits
        if abs(normalize_yaw(local.yaw - local_hint)) > ctx.axis_gate:
            return None
    pose = compose_pose(ctx.mount, local)
    if ctx.position_gate is not None and ref_position is not None:
        # the nearest fitted corner is not a real corner when only a slice of the car is seen
        if pose.distance_to(ref_position) > ctx.position_gate:
            return None
    corner_map = compose_pose(ctx.mount, Pose2D(corner[0], corner[1], 0.0))
    return RsuMeasurement(
        pose=pose,
        cov=rsu_covariance(ctx.model_id),
        stamp=frame.stamp,
        source=Source.RSU,
        alignment_corner=(corner_map.x, corner_map.y),
        raw_rect=rect,
        lfa_point_count=int(pts.shape[0]),
    )
