"""Scenario description and the closed simulation loop.

A vehicle follows a scripted polyline at constant speed. Every 100 ms the
onboard localizer surrogate fires and each roadside unit in range scans,
estimates a pose and sends it over the channel. The EKF predicts at its own
rate and takes delivered roadside poses through delay compensation and
smooth updates.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .channel import Channel, ChannelConfig
from .core import (
    PoseMeasurement,
    Pose2D,
    Source,
    VehicleSpec,
    ndt_covariance,
)
from .ekf import EkfConfig, FusionFilter
from .perception import (
    MATCH_THRESHOLD,
    ROI_RADIUS,
    RsuContext,
    build_background_index,
    estimate_vehicle_pose,
)
from .scan import MODEL_DEFAULTS, BackgroundScene, Box, SensorModel, VehicleBoxState, generate_scan

SENSOR_RATE = 10.0

# Independent RNG stream families; keys never change so one subsystem's draws
# do not move when another is toggled.
STREAM_NDT = 1
STREAM_SCAN = 2
STREAM_CHANNEL = 3
STREAM_REFERENCE = 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------- road


class Road:
    """Polyline parameterized by arc length."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("road needs at least two (x, y) vertices")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("road has zero-length segments")
        self.points = pts
        self._seg = seg
        self._lengths = lengths
        self._cum = np.concatenate([[0.0], np.cumsum(lengths)])
        self.length = float(self._cum[-1])

    def pose_at(self, s: float) -> Pose2D:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self._lengths) - 1)
        u = self._seg[i] / self._lengths[i]
        p = self.points[i] + u * (s - self._cum[i])
        return Pose2D(p[0], p[1], math.atan2(u[1], u[0]))

    def coverage_interval(self, center, radius: float) -> Optional[tuple[float, float]]:
        """Arc-length span where the road lies within ``radius`` of ``center``."""
        c = np.asarray(center, dtype=float)
        lo, hi = math.inf, -math.inf
        for i, L in enumerate(self._lengths):
            u = self._seg[i] / L
            w = self.points[i] - c
            b = float(np.dot(u, w))
            disc = b * b - (float(np.dot(w, w)) - radius * radius)
            if disc < 0:
                continue
            r = math.sqrt(disc)
            a0, a1 = max(-b - r, 0.0), min(-b + r, L)
            if a0 > a1:
                continue
            lo = min(lo, self._cum[i] + a0)
            hi = max(hi, self._cum[i] + a1)
        return None if lo > hi else (float(lo), float(hi))


# ------------------------------------------------------------------------- config


@dataclass(frozen=True)
class RoadConfig:
    points: tuple = ((0.0, 0.0), (250.0, 0.0))
    speed: float = 8.0


@dataclass(frozen=True)
class VehicleConfig:
    length: float = 4.5
    width: float = 1.8
    height: float = 1.5
    id: str = "ego"
    start_offset: float = 0.0
    mirror_stubs: bool = False

    @property
    def spec(self) -> VehicleSpec:
        return VehicleSpec(self.length, self.width, self.height, self.id)


@dataclass(frozen=True)
class RsuConfig:
    x: float = 125.0
    y: float = 4.0
    yaw: float = -math.pi / 2
    height: float = 2.0
    sensor: str = "VLP32C"
    effective_range: Optional[float] = None
    range_noise_sigma: float = 0.02
    azimuth_step_deg: float = 0.4
    elevations_deg: Optional[tuple] = None
    roi_radius: float = ROI_RADIUS
    match_threshold: float = MATCH_THRESHOLD

    @property
    def mount(self) -> Pose2D:
        return Pose2D(self.x, self.y, self.yaw)

    @property
    def range(self) -> float:
        if self.effective_range is not None:
            return self.effective_range
        return MODEL_DEFAULTS[self.sensor.upper()]["effective_range"]

    def sensor_model(self) -> SensorModel:
        kw = dict(azimuth_step=math.radians(self.azimuth_step_deg), range_noise_sigma=self.range_noise_sigma,
                  rate=SENSOR_RATE)
        if self.elevations_deg is not None:
            return SensorModel(model_id=self.sensor.upper(), max_range=max(2 * self.range, 100.0),
                               elevations=tuple(math.radians(e) for e in self.elevations_deg), **kw)
        return SensorModel.stock(self.sensor, **kw)


@dataclass(frozen=True)
class Zone:
    start: float
    end: float
    multiplier: float


@dataclass(frozen=True)
class NdtProfile:
    base_sigma_xy: float = 0.03
    base_sigma_yaw: float = 0.005
    zones: tuple = (Zone(70.0, 180.0, 3.5),)
    blend: float = 5.0
    correlation_time: float = 1.0  # seconds; 0 gives independent draws

    def multiplier(self, s: float) -> float:
        m = 1.0
        half = self.blend / 2
        for z in self.zones:
            if self.blend > 0:
                w = min(max((s - (z.start - half)) / self.blend, 0.0), 1.0)
                w *= min(max(((z.end + half) - s) / self.blend, 0.0), 1.0)
            else:
                w = 1.0 if z.start <= s < z.end else 0.0
            m = max(m, 1.0 + (z.multiplier - 1.0) * w)
        return m


@dataclass(frozen=True)
class ScenarioConfig:
    road: RoadConfig = RoadConfig()
    vehicle: VehicleConfig = VehicleConfig()
    rsus: tuple = (RsuConfig(),)
    static_boxes: tuple = (
        Box(125.0, 12.0, 30.0, 6.0, 0.0, 8.0),
        Box(125.0, -9.0, 100.0, 0.5, 0.0, 2.0),
        Box(105.0, 5.5, 0.3, 0.3, 0.0, 4.0),
        Box(145.0, 5.5, 0.3, 0.3, 0.0, 4.0),
    )
    ndt: NdtProfile = NdtProfile()
    channel: ChannelConfig = ChannelConfig()
    ekf: EkfConfig = EkfConfig()
    duration: Optional[float] = None
    master_seed: int = 0
    trial_count: int = 10

    def validate(self) -> "ScenarioConfig":
        try:
            road = Road(self.road.points)
        except ValueError as exc:
            raise ConfigError(f"road.points: {exc}") from None
        if not self.road.speed > 0:
            raise ConfigError("road.speed: must be > 0")
        if not 0 <= self.vehicle.start_offset < road.length:
            raise ConfigError("vehicle.start_offset: must lie on the road")
        for i, z in enumerate(self.ndt.zones):
            if not 0 <= z.start <= z.end <= road.length:
                raise ConfigError(f"ndt.zones[{i}]: must lie within the road (0..{road.length})")
            if not z.multiplier > 0:
                raise ConfigError(f"ndt.zones[{i}].multiplier: must be > 0")
        for i, r in enumerate(self.rsus):
            if r.sensor.upper() not in MODEL_DEFAULTS and r.elevations_deg is None:
                raise ConfigError(f"rsus[{i}].sensor: unknown model {r.sensor!r} without elevations_deg")
            if r.sensor.upper() not in ("VLP16", "VLP32C"):
                raise ConfigError(f"rsus[{i}].sensor: no RSU covariance for {r.sensor!r}")
            if not r.height > 0:
                raise ConfigError(f"rsus[{i}].height: must be > 0")
        period = self.ekf.predict_rate / SENSOR_RATE
        if abs(period - round(period)) > 1e-9 or round(period) < 1:
            raise ConfigError("ekf.predict_rate: must be a positive multiple of 10 Hz")
        if self.duration is not None and not self.duration > 0:
            raise ConfigError("duration: must be > 0")
        if self.trial_count < 1:
            raise ConfigError("trial_count: must be >= 1")
        return self

    @property
    def road_model(self) -> Road:
        return Road(self.road.points)

    @property
    def scene(self) -> BackgroundScene:
        return BackgroundScene(tuple(self.static_boxes))

    def sim_duration(self) -> float:
        to_end = (self.road_model.length - self.vehicle.start_offset) / self.road.speed
        return to_end if self.duration is None else min(self.duration, to_end)

    def with_sensor(self, sensor: str) -> "ScenarioConfig":
        sensor = sensor.upper()
        return replace(self, rsus=tuple(replace(r, sensor=sensor, effective_range=None) for r in self.rsus))

    def with_channel(self, delay: Optional[float] = None, loss: Optional[float] = None) -> "ScenarioConfig":
        ch = self.channel
        return replace(self, channel=ChannelConfig(
            ch.delay if delay is None else delay, ch.loss_prob if loss is None else loss, ch.seed))

    def without_rsus(self) -> "ScenarioConfig":
        return replace(self, rsus=())


def default_config(sensor: str = "VLP32C", **overrides) -> ScenarioConfig:
    return replace(ScenarioConfig().with_sensor(sensor), **overrides).validate()


def _strict(data, cls, path: str, convert: dict = None) -> dict:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    names = {f.name for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"{where}: unknown key")
        if convert and key in convert:
            value = convert[key](value, f"{path}.{key}" if path else key)
        out[key] = value
    return out


def _build(cls, data, path, convert=None):
    kw = _strict(data, cls, path, convert)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def _tuple_of_pairs(value, path):
    try:
        return tuple((float(a), float(b)) for a, b in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a list of [x, y] pairs") from None


def _list_of(cls, convert=None):
    def conv(value, path):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_build(cls, v, f"{path}[{i}]", convert) for i, v in enumerate(value))
    return conv


def _floats(value, path):
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a list of numbers") from None


def _channel(value, path):
    kw = _strict(value, _ChannelSchema, path)
    try:
        return ChannelConfig(delay=kw.get("delay_ms", 0.0) / 1000.0, loss_prob=kw.get("loss", 0.0),
                             seed=int(kw.get("seed", 0)))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class _ChannelSchema:
    delay_ms: float = 0.0
    loss: float = 0.0
    seed: int = 0


def config_from_dict(data: dict) -> ScenarioConfig:
    """Build a validated config; unknown keys fail with their dotted path."""
    convert = {
        "road": lambda v, p: _build(RoadConfig, v, p, {"points": _tuple_of_pairs}),
        "vehicle": lambda v, p: _build(VehicleConfig, v, p),
        "rsus": _list_of(RsuConfig, {"elevations_deg": _floats}),
        "static_boxes": _list_of(Box),
        "ndt": lambda v, p: _build(NdtProfile, v, p, {"zones": _list_of(Zone)}),
        "channel": _channel,
        "ekf": lambda v, p: _build(EkfConfig, v, p, {"process_noise": _floats, "initial_std": _floats}),
    }
    cfg = _build(ScenarioConfig, data, "", convert)
    return cfg.validate()


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return config_from_dict(data or {})


# --------------------------------------------------------------------- simulation


def stream(trial_seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(trial_seed), spawn_key=tuple(key)))


def ndt_surrogate(truth: Pose2D, arc_length: float, profile: NdtProfile, rng: np.random.Generator,
                  stamp: float = 0.0, unit_noise=None) -> PoseMeasurement:
    """Noisy onboard pose whose reported covariance never reflects the zone.

    ``unit_noise`` replaces the fresh standard-normal triple (x, y, yaw) when
    the caller carries its own correlated noise state.
    """
    m = profile.multiplier(arc_length)
    n = rng.standard_normal(3) if unit_noise is None else unit_noise
    sxy, syaw = profile.base_sigma_xy * m, profile.base_sigma_yaw * m
    pose = Pose2D(truth.x + sxy * n[0], truth.y + sxy * n[1], truth.yaw + syaw * n[2])
    return PoseMeasurement(pose, ndt_covariance(), stamp, Source.NDT)


class NdtSurrogate:
    """Stateful surrogate with first-order Gauss-Markov noise.

    The unit noise keeps a standard-normal marginal, so the per-axis spread
    still equals the zone-scaled sigma; only its time correlation changes.
    """

    def __init__(self, profile: NdtProfile, rng: np.random.Generator):
        self.profile = profile
        self.rng = rng
        self._n = None
        self._stamp = None

    def measure(self, truth: Pose2D, arc_length: float, stamp: float) -> PoseMeasurement:
        w = self.rng.standard_normal(3)
        tau = self.profile.correlation_time
        if self._n is None or tau <= 0:
            n = w
        else:
            rho = math.exp(-(stamp - self._stamp) / tau)
            n = rho * self._n + math.sqrt(1.0 - rho * rho) * w
        self._n, self._stamp = n, stamp
        return ndt_surrogate(truth, arc_length, self.profile, self.rng, stamp, unit_noise=n)


@dataclass
class TickRecord:
    t: float
    arc: float
    truth: Pose2D
    fused: Pose2D
    ndt: Optional[PoseMeasurement] = None
    rsu_delivered: list = field(default_factory=list)
    rsu_sent: int = 0
    in_coverage: bool = False


@dataclass
class TrajectoryLog:
    records: list
    seed: int
    rejected: int = 0

    def arrays(self) -> dict:
        r = self.records
        return {
            "t": np.array([x.t for x in r]),
            "arc": np.array([x.arc for x in r]),
            "truth": np.array([[x.truth.x, x.truth.y, x.truth.yaw] for x in r]),
            "fused": np.array([[x.fused.x, x.fused.y, x.fused.yaw] for x in r]),
        }

    def errors(self) -> np.ndarray:
        a = self.arrays()
        d = a["fused"][:, :2] - a["truth"][:, :2]
        return np.hypot(d[:, 0], d[:, 1])

    def rows(self):
        for r in self.records:
            rsu = r.rsu_delivered[-1] if r.rsu_delivered else None
            yield {
                "t": f"{r.t:.4f}",
                "arc": f"{r.arc:.4f}",
                "truth_x": repr(r.truth.x), "truth_y": repr(r.truth.y), "truth_yaw": repr(r.truth.yaw),
                "ndt_x": "" if r.ndt is None else repr(r.ndt.pose.x),
                "ndt_y": "" if r.ndt is None else repr(r.ndt.pose.y),
                "rsu_x": "" if rsu is None else repr(rsu.pose.x),
                "rsu_y": "" if rsu is None else repr(rsu.pose.y),
                "rsu_stamp": "" if rsu is None else f"{rsu.stamp:.4f}",
                "rsu_points": "" if rsu is None else str(getattr(rsu, "lfa_point_count", "")),
                "fused_x": repr(r.fused.x), "fused_y": repr(r.fused.y), "fused_yaw": repr(r.fused.yaw),
                "error": repr(math.hypot(r.fused.x - r.truth.x, r.fused.y - r.truth.y)),
                "in_coverage": int(r.in_coverage),
            }

    def digest(self) -> str:
        h = hashlib.sha256()
        for row in self.rows():
            h.update(repr(sorted(row.items())).encode())
        return h.hexdigest()


@dataclass
class _RsuRuntime:
    cfg: RsuConfig
    sensor: SensorModel
    ctx: RsuContext
    channel: Channel


def _setup_rsus(cfg: ScenarioConfig, trial_seed: int) -> list:
    scene = cfg.scene
    out = []
    for i, rc in enumerate(cfg.rsus):
        sensor = rc.sensor_model()
        reference = generate_scan(sensor, rc.mount, rc.height, scene, None,
                                  stream(trial_seed, STREAM_REFERENCE, i), stamp=0.0, frame_id=f"rsu{i}")
        ctx = RsuContext(
            index=build_background_index(reference),
            mount=rc.mount,
            mount_height=rc.height,
            vehicle=cfg.vehicle.spec,
            model_id=rc.sensor.upper(),
            effective_range=rc.range,
            ground_z=scene.ground_z,
            roi_radius=rc.roi_radius,
            match_threshold=rc.match_threshold,
            road_heading=cfg.road_model.pose_at(0.0).yaw,
        )
        ch_rng = np.random.default_rng(np.random.SeedSequence(
            entropy=[int(trial_seed), int(cfg.channel.seed)], spawn_key=(STREAM_CHANNEL, i)))
        out.append(_RsuRuntime(rc, sensor, ctx, Channel(cfg.channel, ch_rng)))
    return out


def run_scenario(cfg: ScenarioConfig, trial_seed: int) -> TrajectoryLog:
    """Simulate one trial; a pure function of ``(cfg, trial_seed)``."""
    road = cfg.road_model
    rate = cfg.ekf.predict_rate
    period = int(round(rate / SENSOR_RATE))
    n_ticks = int(math.floor(cfg.sim_duration() * rate + 1e-9))
    ndt_source = NdtSurrogate(cfg.ndt, stream(trial_seed, STREAM_NDT))
    rsus = _setup_rsus(cfg, trial_seed)
    scene = cfg.scene
    speed = cfg.road.speed

    flt: Optional[FusionFilter] = None
    records = []
    for n in range(n_ticks + 1):
        t = n / rate
        s = cfg.vehicle.start_offset + speed * t
        truth = road.pose_at(s)
        if flt is not None:
            flt.advance()

        ndt = None
        sensor_tick = n % period == 0
        if sensor_tick:
            ndt = ndt_source.measure(truth, s, t)
            if flt is None:
                # initial speed comes from the vehicle's own odometry
                flt = FusionFilter.from_measurement(cfg.ekf, ndt, speed=speed)
            else:
                flt.update(ndt)

        in_cov = False
        sent = 0
        for i, rt in enumerate(rsus):
            in_range = truth.distance_to(rt.cfg.mount) <= rt.ctx.effective_range
            in_cov = in_cov or in_range
            if not (sensor_tick and in_range):
                continue
            frame_no = n // period
            vehicle = VehicleBoxState(truth, cfg.vehicle.spec, mirror_stubs=cfg.vehicle.mirror_stubs)
            frame = generate_scan(rt.sensor, rt.cfg.mount, rt.cfg.height, scene, vehicle,
                                  stream(trial_seed, STREAM_SCAN, i, frame_no), stamp=t, frame_id=f"rsu{i}")
            m = flt.state.mean
            ref = Pose2D(m[0], m[1], m[2])
            meas = estimate_vehicle_pose(frame, rt.ctx, ref_position=ref, prev_heading=ref.yaw)
            if meas is not None:
                rt.channel.send(meas, t)
                sent += 1

        delivered = []
        for rt in rsus:
            # tolerance absorbs float error in t + delay against the tick grid
            for payload in rt.channel.drain(t + 1e-9):
                flt.update_smooth(payload)
                delivered.append(payload)

        m = flt.state.mean
        records.append(TickRecord(t, s, truth, Pose2D(m[0], m[1], m[2]), ndt, delivered, sent, in_cov))
    return TrajectoryLog(records, trial_seed, flt.rejected if flt else 0)
