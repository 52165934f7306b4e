import math

import numpy as np
import pytest

from rsucoop.core import Pose2D, VehicleSpec
from rsucoop.scan import (
    FACE_TOP, OBJ_GROUND, OBJ_MIRROR, OBJ_STATIC, OBJ_VEHICLE, BackgroundScene, Box, SensorModel,
    VehicleBoxState, beam_table, cast_ray, cast_rays, generate_scan, sensor_to_map,
)

SPEC = VehicleSpec(4.5, 1.8, 1.5)


# ---------------------------------------------------------------- oracles


def slab_oracle(origin, direction, box: Box) -> float:
    """Scalar slab test in the box frame, written independently of the library."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rx, ry = origin[0] - box.cx, origin[1] - box.cy
    o = (c * rx + s * ry, -s * rx + c * ry, origin[2])
    d = (c * direction[0] + s * direction[1], -s * direction[0] + c * direction[1], direction[2])
    lo = (-box.length / 2, -box.width / 2, box.z_min)
    hi = (box.length / 2, box.width / 2, box.z_max)
    t_in, t_out = -math.inf, math.inf
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return math.inf
            continue
        a, b = (lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]
        t_in, t_out = max(t_in, min(a, b)), min(t_out, max(a, b))
    if t_in > t_out or t_out <= 0:
        return math.inf
    return t_in if t_in > 0 else t_out


def scene_oracle(origin, direction, boxes, ground_z=0.0) -> float:
    best = math.inf
    if direction[2] < 0:
        t = (ground_z - origin[2]) / direction[2]
        if t > 0:
            best = t
    for b in boxes:
        best = min(best, slab_oracle(origin, direction, b))
    return best


# ---------------------------------------------------------------- beam tables


def test_vlp16_table():
    el = np.degrees(beam_table("VLP16"))
    assert len(el) == 16
    assert el.min() == pytest.approx(-15) and el.max() == pytest.approx(15)
    np.testing.assert_allclose(np.diff(el), 2.0, atol=1e-12)


def test_vlp32c_table():
    el = np.degrees(beam_table("VLP32C"))
    assert len(el) == 32
    assert el.min() == pytest.approx(-25) and el.max() == pytest.approx(15)
    assert np.all(np.diff(el) > 0)


def test_custom_needs_explicit_elevations():
    with pytest.raises(ValueError):
        beam_table("Custom")
    s = SensorModel.custom([0.0])
    assert s.elevations == (0.0,)


def test_custom_single_ring_is_horizontal():
    s = SensorModel.custom([0.0], range_noise_sigma=0.0)
    scene = BackgroundScene((Box(0, 0, 40, 40, -1, 5),))  # sensor inside a closed room
    pc = generate_scan(s, Pose2D(0, 0, 0), 2.0, scene, None, None)
    assert len(pc) == s.n_columns
    np.testing.assert_allclose(pc.points[:, 2], 0.0, atol=1e-12)


@pytest.mark.parametrize("kw", [dict(elevations=()), dict(elevations=(0.1, 0.0)),
                                dict(elevations=(0.0,), azimuth_step=math.pi / 8),
                                dict(elevations=(0.0,), range_noise_sigma=-1.0)])
def test_sensor_model_invariants(kw):
    with pytest.raises(ValueError):
        SensorModel(model_id="Custom", **kw)


# ---------------------------------------------------------------- cast_ray


def test_straight_down_hits_ground():
    assert cast_ray((0, 0, 2), (0, 0, -1), BackgroundScene()) == pytest.approx(2.0, abs=1e-15)


def test_horizontal_ray_passes_over_vehicle():
    veh = VehicleBoxState(Pose2D(10 + SPEC.length / 2, 0, 0), SPEC)
    assert cast_ray((0, 0, 2), (1, 0, 0), BackgroundScene(), veh) is None
    # the same ray lowered to 1 m hits the face at x = 10
    assert cast_ray((0, 0, 1), (1, 0, 0), BackgroundScene(), veh) == pytest.approx(10.0, abs=1e-12)


def test_cast_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        cast_ray((0, 0, 2), (0, 0, -2), BackgroundScene())


def test_max_range_cuts_hits():
    assert cast_ray((0, 0, 2), (0, 0, -1), BackgroundScene(), max_range=1.5) is None


def test_slab_oracle_agreement_1000_rays(rng):
    statics = tuple(Box(*rng.uniform(-15, 15, 2), *rng.uniform(0.5, 6, 2), 0.0, rng.uniform(0.5, 5))
                    for _ in range(6))
    scene = BackgroundScene(statics)
    veh = VehicleBoxState(Pose2D(3.0, -2.0, 0.7), SPEC, mirror_stubs=True)
    boxes = list(statics) + [veh.body()] + veh.mirrors()
    origins = np.c_[rng.uniform(-20, 20, (1000, 2)), rng.uniform(0.2, 6, 1000)]
    dirs = rng.normal(size=(1000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # aim half of the rays at the vehicle so box hits are well represented
    aim = np.array([3.0, -2.0, 0.8]) + rng.uniform(-2, 2, (500, 3)) * [1, 0.5, 0.4] - origins[:500]
    dirs[:500] = aim / np.linalg.norm(aim, axis=1, keepdims=True)
    dist, obj, _ = cast_rays(origins, dirs, scene, veh)
    hits_vehicle = 0
    for i in range(1000):
        expect = scene_oracle(origins[i], dirs[i], boxes)
        if math.isinf(expect):
            assert np.isnan(dist[i])
        else:
            assert abs(dist[i] - expect) < 1e-9
        hits_vehicle += obj[i] in (OBJ_VEHICLE, OBJ_MIRROR)
    assert hits_vehicle > 100


# ---------------------------------------------------------------- generate_scan


def test_flat_ground_z_equals_minus_height():
    s = SensorModel.custom(np.radians(np.arange(-15, 0)), range_noise_sigma=0.0, max_range=1000.0)
    pc = generate_scan(s, Pose2D(3, 4, 0.3), 2.0, BackgroundScene(), None, None)
    assert len(pc) == 15 * s.n_columns
    assert np.max(np.abs(pc.points[:, 2] + 2.0)) < 1e-9


def test_scan_is_deterministic():
    s = SensorModel.stock("VLP16")
    scene = BackgroundScene((Box(10, 5, 4, 2, 0, 3),))
    veh = VehicleBoxState(Pose2D(8, -3, 0.4), SPEC)
    a = generate_scan(s, Pose2D(0, 0, 0.1), 2.0, scene, veh, np.random.default_rng(7))
    b = generate_scan(s, Pose2D(0, 0, 0.1), 2.0, scene, veh, np.random.default_rng(7))
    assert a.points.tobytes() == b.points.tobytes()


def test_point_count_bound(rng):
    for model in ("VLP16", "VLP32C"):
        s = SensorModel.stock(model)
        scene = BackgroundScene((Box(0, 0, 60, 60, -1, 10),))  # enclosed: every ray hits
        pc = generate_scan(s, Pose2D(0, 0, 0), 2.0, scene, None, rng)
        assert len(pc) <= len(s.elevations) * math.ceil(2 * math.pi / s.azimuth_step)


def test_ray_order_is_azimuth_major():
    s = SensorModel.custom([math.radians(-10), math.radians(-5)], azimuth_step=math.radians(1), range_noise_sigma=0)
    pc = generate_scan(s, Pose2D(0, 0, 0), 2.0, BackgroundScene(), None, None)
    az = np.arctan2(pc.points[:, 1], pc.points[:, 0]) % (2 * math.pi)
    # consecutive pairs share an azimuth, elevation ascending inside the pair
    np.testing.assert_allclose(az[0::2], az[1::2], atol=1e-12)
    assert np.all(pc.points[0::2, 2] / np.linalg.norm(pc.points[0::2], axis=1)
                  < pc.points[1::2, 2] / np.linalg.norm(pc.points[1::2], axis=1))


def test_culled_scan_matches_full_cast(rng):
    s = SensorModel.stock("VLP32C", range_noise_sigma=0.0)
    scene = BackgroundScene((Box(20, 12, 30, 6, 0, 8), Box(5, 5.5, 0.3, 0.3, 0, 6)))
    mount = Pose2D(2.0, 4.0, -math.pi / 2)
    for _ in range(5):
        veh = VehicleBoxState(Pose2D(*rng.uniform(-25, 25, 2), rng.uniform(-math.pi, math.pi)), SPEC,
                              mirror_stubs=True)
        pc, obj, face = generate_scan(s, mount, 2.0, scene, veh, None, return_labels=True)
        # full cast in the map frame over every ray, no culling
        n_az = s.n_columns
        az = np.repeat(np.arange(n_az) * s.azimuth_step, len(s.elevations)) + mount.yaw
        el = np.tile(np.array(s.elevations), n_az)
        d = np.c_[np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
        dist, fobj, fface = cast_rays(np.array([mount.x, mount.y, 2.0]), d, scene, veh, s.max_range)
        hit = ~np.isnan(dist)
        np.testing.assert_array_equal(obj, fobj[hit])
        np.testing.assert_array_equal(face, fface[hit])
        pts_map = sensor_to_map(pc.points, mount, 2.0)
        np.testing.assert_allclose(np.linalg.norm(pts_map - [mount.x, mount.y, 2.0], axis=1), dist[hit],
                                   atol=1e-9)


def _points_on_surfaces(points_map, obj, face, scene, veh):
    boxes = {OBJ_VEHICLE: [veh.body()], OBJ_MIRROR: veh.mirrors()}
    for i, b in enumerate(scene.static_boxes):
        boxes[OBJ_STATIC + i] = [b]
    worst = 0.0
    for p, o, f in zip(points_map, obj, face):
        if o == OBJ_GROUND:
            worst = max(worst, abs(p[2] - scene.ground_z))
            continue
        best = math.inf
        for b in boxes[o]:
            c, s = math.cos(b.yaw), math.sin(b.yaw)
            rx, ry = p[0] - b.cx, p[1] - b.cy
            local = (c * rx + s * ry, -s * rx + c * ry, p[2])
            lo = (-b.length / 2, -b.width / 2, b.z_min)
            hi = (b.length / 2, b.width / 2, b.z_max)
            axis, side = divmod(int(f), 2)
            plane = (lo, hi)[side][axis]
            off = abs(local[axis] - plane)
            out = max(max(lo[k] - local[k], local[k] - hi[k], 0.0) for k in range(3) if k != axis)
            best = min(best, max(off, out))
        worst = max(worst, best)
    return worst


def test_noise_free_points_lie_on_surfaces(rng):
    s = SensorModel.stock("VLP32C", range_noise_sigma=0.0)
    scene = BackgroundScene((Box(20, 12, 30, 6, 0, 8, 0.2), Box(5, 5.5, 0.3, 0.3, 0, 6)))
    mount = Pose2D(2.0, 4.0, 0.3)
    for _ in range(3):
        veh = VehicleBoxState(Pose2D(*rng.uniform(-15, 15, 2), rng.uniform(-math.pi, math.pi)), SPEC,
                              mirror_stubs=True)
        pc, obj, face = generate_scan(s, mount, 2.0, scene, veh, None, return_labels=True)
        pts = sensor_to_map(pc.points, mount, 2.0)
        assert _points_on_surfaces(pts, obj, face, scene, veh) < 1e-9


@pytest.mark.parametrize("sensor_xy, forbidden", [((0.0, 0.0), {1, 2, 3, 4}), ((0.0, 5.0), {1, 2, 4})])
def test_self_occlusion_far_faces_empty(sensor_xy, forbidden):
    s = SensorModel.stock("VLP32C", range_noise_sigma=0.0)
    veh = VehicleBoxState(Pose2D(15.0, 0.0, 0.0), SPEC)
    pc, obj, face = generate_scan(s, Pose2D(*sensor_xy, 0.0), 2.0, BackgroundScene(), veh, None,
                                  return_labels=True)
    seen = set(face[obj == OBJ_VEHICLE].tolist())
    assert 0 in seen and FACE_TOP in seen
    assert not seen & forbidden


def test_self_occlusion_random_poses(rng):
    # any vehicle point must lie on a face whose outward side contains the sensor
    s = SensorModel.stock("VLP16", range_noise_sigma=0.0)
    for _ in range(10):
        p = Pose2D(*rng.uniform(-20, 20, 2), rng.uniform(-math.pi, math.pi))
        if math.hypot(p.x, p.y) < 4:
            continue
        veh = VehicleBoxState(p, SPEC)
        _, obj, face = generate_scan(s, Pose2D(0, 0, 0), 2.0, BackgroundScene(), veh, None, return_labels=True)
        c, sn = math.cos(p.yaw), math.sin(p.yaw)
        sensor_local = (c * -p.x + sn * -p.y, -sn * -p.x + c * -p.y, 2.0)
        bounds = ((-SPEC.length / 2, SPEC.length / 2), (-SPEC.width / 2, SPEC.width / 2), (0.0, SPEC.height))
        for f in set(face[obj == OBJ_VEHICLE].tolist()):
            axis, side = divmod(f, 2)
            if side == 0:
                assert sensor_local[axis] < bounds[axis][0]
            else:
                assert sensor_local[axis] > bounds[axis][1]


def _low_count_oracle(model: str, d: float) -> int:
    """Rays that strike the near broadside face below 0.8 m, by direct enumeration."""
    el = np.array(beam_table(model))
    step = math.radians(0.4)
    n_az = int(math.ceil(2 * math.pi / step - 1e-9))
    count = 0
    y_face = d - SPEC.width / 2
    for k in range(n_az):
        a = k * step
        for e in el:
            dy = math.cos(e) * math.sin(a)
            if dy <= 0:
                continue
            t = y_face / dy
            x = t * math.cos(e) * math.cos(a)
            z = 2.0 + t * math.sin(e)
            if -SPEC.length / 2 <= x <= SPEC.length / 2 and 0.0 <= z < 0.8:
                count += 1
    return count


@pytest.mark.parametrize("model", ["VLP16", "VLP32C"])
def test_low_points_grow_as_vehicle_approaches(model):
    s = SensorModel.stock(model, range_noise_sigma=0.0)
    counts = []
    for d in (30.0, 25.0, 20.0, 15.0, 10.0):
        veh = VehicleBoxState(Pose2D(0.0, d, 0.0), SPEC)
        pc, obj, _ = generate_scan(s, Pose2D(0, 0, 0), 2.0, BackgroundScene(), veh, None, return_labels=True)
        z = pc.points[:, 2] + 2.0
        n = int(np.sum((obj == OBJ_VEHICLE) & (z < 0.8)))
        assert n == _low_count_oracle(model, d)
        counts.append(n)
    assert counts[0] > 0
    if model == "VLP16":
        assert all(b > a for a, b in zip(counts, counts[1:]))
    else:
        # the 32-beam table clusters rings near the horizon, so the low band is
        # crossed by fewer rings up close; the count is not monotone there
        assert counts == [92, 135, 132, 135, 138]


def test_mirror_stubs_sit_above_cutoff():
    veh = VehicleBoxState(Pose2D(0, 0, 0.3), SPEC, mirror_stubs=True)
    ms = veh.mirrors()
    assert len(ms) == 2 and all(m.z_min > 0.8 for m in ms)
    assert VehicleBoxState(Pose2D(0, 0, 0), SPEC).mirrors() == []


def test_mount_height_must_be_positive():
    with pytest.raises(ValueError):
        generate_scan(SensorModel.stock("VLP16"), Pose2D(0, 0, 0), 0.0, BackgroundScene(), None, None)
