import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rsucoop.core import (
    UNOBSERVED, CovarianceSpec, PointCloud, Pose2D, PoseMeasurement, Source, VehicleSpec,
    compose_pose, covariance_matrix, invert_pose, ndt_covariance, normalize_yaw, rsu_covariance,
)

coord = st.floats(-1e3, 1e3, allow_nan=False)
angle = st.floats(-10 * math.pi, 10 * math.pi, allow_nan=False)
poses = st.builds(Pose2D, coord, coord, angle)


def close_pose(a: Pose2D, b: Pose2D, tol: float) -> bool:
    return abs(a.x - b.x) <= tol and abs(a.y - b.y) <= tol and abs(normalize_yaw(a.yaw - b.yaw)) <= tol


def test_compose_identity_parent():
    p = compose_pose(Pose2D(0, 0, 0), Pose2D(3, 4, 0.5))
    assert (p.x, p.y, p.yaw) == (3, 4, 0.5)


def test_compose_quarter_turn():
    p = compose_pose(Pose2D(10, 0, math.pi / 2), Pose2D(1, 0, 0))
    assert close_pose(p, Pose2D(10, 1, math.pi / 2), 1e-12)


@settings(max_examples=300, deadline=None)
@given(poses, poses)
def test_compose_inverse_round_trip(p, c):
    # absolute tolerance scaled to the coordinate magnitude (1e3 m * eps)
    back = compose_pose(p, compose_pose(invert_pose(p), c))
    assert close_pose(back, c, 1e-12 * max(1.0, abs(p.x), abs(p.y), abs(c.x), abs(c.y)))


def test_compose_inverse_round_trip_unit_scale(rng):
    for _ in range(500):
        p = Pose2D(*rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi))
        c = Pose2D(*rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi))
        assert close_pose(compose_pose(p, compose_pose(invert_pose(p), c)), c, 1e-12)


def test_compose_associative(rng):
    for _ in range(500):
        a, b, c = (Pose2D(*rng.uniform(-1, 1, 2), rng.uniform(-math.pi, math.pi)) for _ in range(3))
        left = compose_pose(compose_pose(a, b), c)
        right = compose_pose(a, compose_pose(b, c))
        assert close_pose(left, right, 1e-12)


def test_normalize_examples():
    assert normalize_yaw(0.0) == 0.0
    assert normalize_yaw(3 * math.pi) == pytest.approx(math.pi, abs=1e-12)
    assert normalize_yaw(-math.pi) == pytest.approx(math.pi, abs=1e-15)
    assert normalize_yaw(math.pi) == math.pi


def test_normalize_remainder_oracle(rng):
    for a in rng.uniform(-10 * math.pi, 10 * math.pi, 5000):
        out = normalize_yaw(a)
        assert -math.pi < out <= math.pi
        k = (out - a) / (2 * math.pi)
        assert abs(k - round(k)) * 2 * math.pi < 1e-12


@given(angle)
def test_normalize_idempotent(a):
    once = normalize_yaw(a)
    assert normalize_yaw(once) == once


@pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
def test_normalize_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        normalize_yaw(bad)


def test_pose_yaw_normalized_on_construction():
    assert Pose2D(0, 0, 2 * math.pi + 0.1).yaw == pytest.approx(0.1)
    with pytest.raises(ValueError):
        Pose2D(math.nan, 0, 0)


def test_covariance_ndt_squares():
    xi = (0.0225, 0.0225, 0.0225, 0.000625, 0.000625, 0.000625)
    m, mask = covariance_matrix(CovarianceSpec.from_sequence(xi))
    assert mask.all()
    np.testing.assert_array_equal(m, np.diag(np.square(xi)))
    np.testing.assert_array_equal(covariance_matrix(ndt_covariance())[0], m)


def test_covariance_rsu_masked():
    spec = CovarianceSpec(0.01486, 0.01486, UNOBSERVED, UNOBSERVED, UNOBSERVED, UNOBSERVED)
    m, mask = covariance_matrix(spec)
    assert mask.tolist() == [True, True, False, False, False, False]
    np.testing.assert_array_equal(m, np.diag([0.01486 ** 2, 0.01486 ** 2]))
    assert rsu_covariance("VLP16") == spec
    assert rsu_covariance("VLP32C").sigma_x == 0.00681


def test_covariance_all_unobserved():
    m, mask = covariance_matrix(CovarianceSpec.from_sequence([UNOBSERVED] * 6))
    assert m.shape == (0, 0) and not mask.any()


def test_infinite_sigma_maps_to_unobserved():
    spec = CovarianceSpec.from_sequence([0.1, 0.1, math.inf, math.inf, math.inf, math.inf])
    assert spec.sigma_z is UNOBSERVED


@pytest.mark.parametrize("bad", [0.0, -0.1, math.nan])
def test_covariance_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        CovarianceSpec(bad, 0.1, 0.1, 0.1, 0.1, 0.1)


sigma = st.one_of(st.just(UNOBSERVED), st.floats(1e-6, 1e3))


@given(st.lists(sigma, min_size=6, max_size=6))
def test_covariance_spd_on_masked_subspace(xi):
    m, mask = covariance_matrix(CovarianceSpec.from_sequence(xi))
    assert m.shape == (mask.sum(), mask.sum())
    if m.size:
        np.testing.assert_array_equal(m, m.T)
        assert np.all(np.linalg.eigvalsh(m) > 0)


def test_point_cloud_invariants():
    pc = PointCloud("rsu0", 0.1, np.zeros((3, 3)))
    assert len(pc) == 3
    with pytest.raises(ValueError):
        PointCloud("", 0.0, np.zeros((1, 3)))
    with pytest.raises(ValueError):
        PointCloud("a", 0.0, np.array([[0.0, math.inf, 0.0]]))
    with pytest.raises(ValueError):
        pc.points[0, 0] = 1.0  # read-only


def test_vehicle_spec_invariants():
    VehicleSpec(4.5, 1.8, 1.5)
    with pytest.raises(ValueError):
        VehicleSpec(1.0, 2.0, 1.5)
    with pytest.raises(ValueError):
        VehicleSpec(4.0, 1.8, 0.0)


def test_measurement_source_consistency():
    PoseMeasurement(Pose2D(0, 0, 0), rsu_covariance("VLP16"), 0.0, Source.RSU)
    with pytest.raises(ValueError):
        PoseMeasurement(Pose2D(0, 0, 0), ndt_covariance(), 0.0, Source.RSU)
    with pytest.raises(ValueError):
        PoseMeasurement(Pose2D(0, 0, 0), ndt_covariance(), -1.0, Source.NDT)
