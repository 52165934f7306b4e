"""Synthetic spinning LiDAR.

Rays from a beam table are cast against a flat ground plane, static boxes and
an optional vehicle cuboid (with optional mirror stubs). The vehicle pose is
frozen for the duration of one sweep.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Optional

import numpy as np

from .core import PointCloud, Pose2D, VehicleSpec

OBJ_NONE = -1
OBJ_GROUND = 0
OBJ_VEHICLE = 1
OBJ_MIRROR = 2
OBJ_STATIC = 100  # static box i is labelled OBJ_STATIC + i

# Faces of a box in its own frame: 2 * axis + (0 for the min side, 1 for the max side).
FACE_TOP = 5

_EPS = 1e-12

MODEL_DEFAULTS = {
    # max_range is the physical range; the RSU pipeline gates at a shorter effective range.
    "VLP16": dict(max_range=100.0, effective_range=30.0),
    "VLP32C": dict(max_range=200.0, effective_range=50.0),
}


@lru_cache(maxsize=None)
def beam_table(model_id: str) -> tuple[float, ...]:
    """Elevation angles in radians, ascending, for a stock sensor model."""
    model_id = model_id.upper()
    if model_id not in MODEL_DEFAULTS:
        raise ValueError(f"{model_id!r} has no stock beam table; give explicit elevations")
    text = resources.files("rsucoop.data").joinpath(f"{model_id.lower()}.txt").read_text()
    degs = [float(line) for line in text.splitlines() if line.strip() and not line.startswith("#")]
    return tuple(math.radians(d) for d in degs)


@dataclass(frozen=True)
class SensorModel:
    model_id: str
    elevations: tuple
    azimuth_step: float = math.radians(0.4)
    max_range: float = 100.0
    range_noise_sigma: float = 0.02
    rate: float = 10.0

    def __post_init__(self):
        el = tuple(float(e) for e in self.elevations)
        if not el:
            raise ValueError("sensor needs at least one elevation")
        if any(b < a for a, b in zip(el, el[1:])):
            raise ValueError("elevations must be sorted ascending")
        object.__setattr__(self, "elevations", el)
        if not 0 < self.azimuth_step < math.pi / 8:
            raise ValueError(f"azimuth_step must be in (0, pi/8), got {self.azimuth_step}")
        if not self.max_range > 0:
            raise ValueError("max_range must be > 0")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")
        if not self.rate > 0:
            raise ValueError("rate must be > 0")

    @classmethod
    def stock(cls, model_id: str, **overrides) -> "SensorModel":
        model_id = model_id.upper()
        kw = dict(max_range=MODEL_DEFAULTS[model_id]["max_range"])
        kw.update(overrides)
        return cls(model_id=model_id, elevations=beam_table(model_id), **kw)

    @classmethod
    def custom(cls, elevations, **overrides) -> "SensorModel":
        return cls(model_id="Custom", elevations=tuple(elevations), **overrides)

    @property
    def n_columns(self) -> int:
        return int(math.ceil(2 * math.pi / self.azimuth_step - 1e-9))

    def with_noise(self, sigma: float) -> "SensorModel":
        return replace(self, range_noise_sigma=sigma)


@dataclass(frozen=True)
class Box:
    """Cuboid with a vertical axis: footprint centered at (cx, cy), rotated by yaw."""

    cx: float
    cy: float
    length: float
    width: float
    z_min: float
    z_max: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0 and self.z_max > self.z_min):
            raise ValueError(f"box extents must be positive: {self}")


@dataclass(frozen=True)
class BackgroundScene:
    static_boxes: tuple = ()
    ground_z: float = 0.0


@dataclass(frozen=True)
class VehicleBoxState:
    pose: Pose2D
    spec: VehicleSpec
    mirror_stubs: bool = False
    mirror_size: tuple = field(default=(0.2, 0.22, 0.18))  # along x, outward, height
    mirror_x: float = 0.9  # forward offset of the stubs from the footprint center
    mirror_z: float = 1.0  # bottom of the stubs; must stay above the LFA height cutoff

    def body(self) -> Box:
        p = self.pose
        return Box(p.x, p.y, self.spec.length, self.spec.width, 0.0, self.spec.height, p.yaw)

    def mirrors(self) -> list[Box]:
        if not self.mirror_stubs:
            return []
        p = self.pose
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        mx, mo, mh = self.mirror_size
        out = []
        for side in (1.0, -1.0):
            lx = self.mirror_x
            ly = side * (self.spec.width / 2 + mo / 2)
            out.append(Box(p.x + c * lx - s * ly, p.y + s * lx + c * ly, mx, mo,
                           self.mirror_z, self.mirror_z + mh, p.yaw))
        return out


def _ray_box(origins: np.ndarray, dirs: np.ndarray, box: Box):
    """Vectorized slab test. Returns (t, face) with t = inf on a miss."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ox = origins[:, 0] - box.cx
    oy = origins[:, 1] - box.cy
    o = np.stack([c * ox + s * oy, -s * ox + c * oy, origins[:, 2]], axis=1)
    d = np.stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]], axis=1)
    lo = np.array([-box.length / 2, -box.width / 2, box.z_min])
    hi = np.array([box.length / 2, box.width / 2, box.z_max])

    parallel = d == 0.0
    safe_d = np.where(parallel, 1.0, d)
    t1 = (lo - o) / safe_d
    t2 = (hi - o) / safe_d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)

    axis = np.argmax(tmin, axis=1)
    tnear = np.take_along_axis(tmin, axis[:, None], axis=1)[:, 0]
    tfar = tmax.min(axis=1)
    hit = (tnear <= tfar) & (tfar > _EPS)
    entering = tnear > _EPS
    t = np.where(hit, np.where(entering, tnear, tfar), np.inf)

    d_axis = np.take_along_axis(d, axis[:, None], axis=1)[:, 0]
    face = 2 * axis + np.where(d_axis > 0, 0, 1)
    if not np.all(entering | ~hit):
        # origin inside the box: report the exit face
        exit_axis = np.argmin(tmax, axis=1)
        d_exit = np.take_along_axis(d, exit_axis[:, None], axis=1)[:, 0]
        exit_face = 2 * exit_axis + np.where(d_exit > 0, 1, 0)
        face = np.where(entering, face, exit_face)
    return t, np.where(hit, face, -1)


def _static_hits(origins: np.ndarray, dirs: np.ndarray, scene: BackgroundScene):
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    obj = np.full(n, OBJ_NONE)
    face = np.full(n, -1)

    dz = dirs[:, 2]
    down = dz < 0
    t_ground = np.full(n, np.inf)
    t_ground[down] = (scene.ground_z - origins[down, 2]) / dz[down]
    t_ground[t_ground <= _EPS] = np.inf
    take = t_ground < best
    best[take] = t_ground[take]
    obj[take] = OBJ_GROUND
    face[take] = FACE_TOP
    for i, box in enumerate(scene.static_boxes):
        _merge_box(origins, dirs, box, OBJ_STATIC + i, best, obj, face)
    return best, obj, face


def _merge_box(origins, dirs, box, label, best, obj, face, rows=None):
    if rows is None:
        t, f = _ray_box(origins, dirs, box)
        take = t < best
        best[take] = t[take]
        obj[take] = label
        face[take] = f[take]
        return
    t, f = _ray_box(origins[rows], dirs[rows], box)
    take = t < best[rows]
    r = rows[take]
    best[r] = t[take]
    obj[r] = label
    face[r] = f[take]


def _vehicle_boxes(vehicle: Optional[VehicleBoxState]) -> list:
    if vehicle is None:
        return []
    return [(OBJ_VEHICLE, vehicle.body())] + [(OBJ_MIRROR, m) for m in vehicle.mirrors()]


def _apply_range(best, obj, face, max_range):
    miss = ~np.isfinite(best) | (best > max_range)
    best[miss] = np.nan
    obj[miss] = OBJ_NONE
    face[miss] = -1
    return best, obj, face


def cast_rays(origins, dirs, scene: BackgroundScene, vehicle: Optional[VehicleBoxState] = None,
              max_range: float = np.inf):
    """Nearest hit for each ray.

    Returns ``(dist, obj, face)`` arrays; misses have ``dist = nan`` and
    ``obj = face = -1``.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
    best, obj, face = _static_hits(origins, dirs, scene)
    for label, box in _vehicle_boxes(vehicle):
        _merge_box(origins, dirs, box, label, best, obj, face)
    return _apply_range(best, obj, face, max_range)


def cast_ray(origin, direction, scene: BackgroundScene, vehicle: Optional[VehicleBoxState] = None,
             max_range: float = np.inf) -> Optional[float]:
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    d, _, _ = cast_rays(np.asarray(origin, dtype=float)[None, :], direction[None, :],
                        scene, vehicle, max_range)
    return None if np.isnan(d[0]) else float(d[0])


@lru_cache(maxsize=16)
def _ray_directions(elevations: tuple, azimuth_step: float) -> np.ndarray:
    n_az = int(math.ceil(2 * math.pi / azimuth_step - 1e-9))
    az = np.arange(n_az) * azimuth_step
    el = np.asarray(elevations)
    az_g, el_g = np.meshgrid(az, el, indexing="ij")  # azimuth-major
    d = np.stack([np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], axis=-1)
    d = d.reshape(-1, 3)
    d.flags.writeable = False
    return d


@lru_cache(maxsize=16)
def _map_directions(elevations: tuple, azimuth_step: float, yaw: float) -> np.ndarray:
    d_sensor = _ray_directions(elevations, azimuth_step)
    c, s = math.cos(yaw), math.sin(yaw)
    d_map = np.empty_like(d_sensor)
    d_map[:, 0] = c * d_sensor[:, 0] - s * d_sensor[:, 1]
    d_map[:, 1] = s * d_sensor[:, 0] + c * d_sensor[:, 1]
    d_map[:, 2] = d_sensor[:, 2]
    d_map.flags.writeable = False
    return d_map


@lru_cache(maxsize=16)
def _cached_static(elevations: tuple, azimuth_step: float, mount: Pose2D, mount_height: float,
                   scene: BackgroundScene):
    # static geometry never moves, so its hits are shared by every sweep of one sensor
    d_map = _map_directions(elevations, azimuth_step, mount.yaw)
    origin = np.array([mount.x, mount.y, scene.ground_z + mount_height])
    out = _static_hits(np.broadcast_to(origin, d_map.shape), d_map, scene)
    for a in out:
        a.flags.writeable = False
    return out


def _rays_near(d_map: np.ndarray, origin: np.ndarray, vehicle: VehicleBoxState) -> np.ndarray:
    """Indices of rays whose horizontal bearing can reach the vehicle's bounding circle."""
    boxes = [b for _, b in _vehicle_boxes(vehicle)]
    dx = vehicle.pose.x - origin[0]
    dy = vehicle.pose.y - origin[1]
    dist = math.hypot(dx, dy)
    radius = max(math.hypot(b.cx - vehicle.pose.x, b.cy - vehicle.pose.y) + math.hypot(b.length, b.width) / 2
                 for b in boxes)
    if dist <= radius * 1.01:
        return np.arange(d_map.shape[0])
    half = math.asin(radius / dist) + 1e-6
    bearing = math.atan2(dy, dx)
    az = np.arctan2(d_map[:, 1], d_map[:, 0])
    diff = np.abs((az - bearing + math.pi) % (2 * math.pi) - math.pi)
    return np.flatnonzero(diff <= half)


def generate_scan(sensor: SensorModel, mount: Pose2D, mount_height: float,
                  scene: BackgroundScene, vehicle: Optional[VehicleBoxState],
                  rng: Optional[np.random.Generator], stamp: float = 0.0,
                  frame_id: str = "rsu", return_labels: bool = False):
    """One full sweep as a point cloud in the sensor frame.

    Range noise is drawn for every ray (hit or not) so the number of draws is
    independent of the scene.
    """
    if not mount_height > 0:
        raise ValueError("mount height must be > 0")
    d_sensor = _ray_directions(sensor.elevations, sensor.azimuth_step)
    d_map = _map_directions(sensor.elevations, sensor.azimuth_step, mount.yaw)
    origin = np.array([mount.x, mount.y, scene.ground_z + mount_height])

    static = _cached_static(sensor.elevations, sensor.azimuth_step, mount, mount_height, scene)
    best, obj, face = (a.copy() for a in static)
    if vehicle is not None:
        origins = np.broadcast_to(origin, d_map.shape)
        rows = _rays_near(d_map, origin, vehicle)
        for label, box in _vehicle_boxes(vehicle):
            _merge_box(origins, d_map, box, label, best, obj, face, rows)
    dist, obj, face = _apply_range(best, obj, face, sensor.max_range)
    if sensor.range_noise_sigma > 0:
        if rng is None:
            raise ValueError("a noisy sensor needs an rng stream")
        dist = dist + rng.normal(0.0, sensor.range_noise_sigma, size=dist.shape[0])
    hit = ~np.isnan(dist)
    pts = d_sensor[hit] * dist[hit, None]
    cloud = PointCloud(frame_id, stamp, pts)
    if return_labels:
        return cloud, obj[hit], face[hit]
    return cloud


def sensor_to_map(points: np.ndarray, mount: Pose2D, mount_height: float, ground_z: float = 0.0) -> np.ndarray:
    c, s = math.cos(mount.yaw), math.sin(mount.yaw)
    out = np.empty_like(points)
    out[:, 0] = mount.x + c * points[:, 0] - s * points[:, 1]
    out[:, 1] = mount.y + s * points[:, 0] + c * points[:, 1]
    out[:, 2] = points[:, 2] + ground_z + mount_height
    return out
