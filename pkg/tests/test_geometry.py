import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from trical.geometry import (
    GeometryError,
    PointCloud,
    Quaternion,
    RigidTransform,
    angular_distance,
    apply,
    compose,
    euler_to_quat,
    inverse,
    quat_normalize,
    quat_to_euler,
)

C45 = math.cos(math.radians(45))


def random_transform(rng, max_t=5.0, source=None, target=None):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return RigidTransform(Quaternion.from_array(q), tuple(rng.uniform(-max_t, max_t, 3)), source, target)


def oracle_matrix(t: RigidTransform) -> np.ndarray:
    # scipy uses scalar-last quaternions
    w, x, y, z = t.rotation.as_array()
    m = np.eye(4)
    m[:3, :3] = Rotation.from_quat([x, y, z, w]).as_matrix()
    m[:3, 3] = t.translation
    return m


def assert_transform_close(a: RigidTransform, b: RigidTransform, tol=1e-9):
    qa, qb = a.rotation.as_array(), b.rotation.as_array()
    if np.dot(qa, qb) < 0:
        qb = -qb
    assert np.max(np.abs(qa - qb)) < tol
    assert np.max(np.abs(a.t - b.t)) < tol


@pytest.mark.parametrize(
    "q, expected",
    [
        (Quaternion(2, 0, 0, 0), (1, 0, 0, 0)),
        (Quaternion(0, 3, 0, 0), (0, 1, 0, 0)),
        (Quaternion(1, 1, 1, 1), (0.5, 0.5, 0.5, 0.5)),
    ],
)
def test_quat_normalize_examples(q, expected):
    assert quat_normalize(q).as_array() == pytest.approx(expected, abs=1e-15)


def test_quat_normalize_zero_raises():
    with pytest.raises(GeometryError, match="degenerate quaternion"):
        quat_normalize(Quaternion(0, 0, 0, 0))


def test_angular_distance_examples():
    q = euler_to_quat(10, 20, 30)
    assert angular_distance(q, q) == 0.0
    assert angular_distance(Quaternion.identity(), Quaternion(C45, 0, 0, C45)) == pytest.approx(90, abs=1e-12)
    assert angular_distance(q, -q) == 0.0


def test_angular_distance_matches_arccos_form():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a, b = random_transform(rng).rotation, random_transform(rng).rotation
        dot = abs(np.dot(a.as_array(), b.as_array()))
        assert angular_distance(a, b) == pytest.approx(np.degrees(2 * np.arccos(min(dot, 1.0))), abs=1e-9)


def test_angular_distance_rejects_non_unit():
    with pytest.raises(GeometryError):
        angular_distance(Quaternion(2, 0, 0, 0), Quaternion.identity())


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(0)
    t = random_transform(rng)
    assert_transform_close(compose(RigidTransform.identity(), t), t, 1e-15)
    assert_transform_close(compose(t, inverse(t)), RigidTransform.identity())


def test_compose_matches_matrix_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        a, b = random_transform(rng), random_transform(rng)
        got = compose(a, b).matrix()
        assert np.max(np.abs(got - oracle_matrix(a) @ oracle_matrix(b))) < 1e-9


def test_compose_frame_mismatch():
    a = RigidTransform.identity("cam", "world")
    b = RigidTransform.identity("lidar", "imu")
    with pytest.raises(GeometryError, match="frame mismatch"):
        compose(a, b)
    c = compose(a, RigidTransform.identity("lidar", "cam"))
    assert (c.source, c.target) == ("lidar", "world")


def test_apply_examples():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(100, 3)) * 10
    pc = PointCloud(pts, "lidar")
    same = apply(RigidTransform.identity(), pc)
    assert np.array_equal(same.points, pts)
    shifted = apply(RigidTransform(Quaternion.identity(), (0, 0, 1)), PointCloud(np.zeros((1, 3))))
    assert shifted.points.tolist() == [[0.0, 0.0, 1.0]]
    t = random_transform(rng, source="lidar", target="cam")
    out = apply(t, pc)
    homo = np.hstack([pts, np.ones((100, 1))]) @ oracle_matrix(t).T
    assert np.max(np.abs(out.points - homo[:, :3])) < 1e-9
    assert out.frame == "cam"
    with pytest.raises(GeometryError):
        apply(t, PointCloud(pts, "imu"))


def test_euler_to_quat_examples():
    assert euler_to_quat(0, 0, 0).as_array() == pytest.approx([1, 0, 0, 0], abs=1e-15)
    assert euler_to_quat(0, 0, 90).as_array() == pytest.approx([C45, 0, 0, C45], abs=1e-15)
    r = Rotation.from_euler("ZYX", [30, 20, 10], degrees=True).as_quat()
    oracle = Quaternion(r[3], r[0], r[1], r[2])
    assert angular_distance(euler_to_quat(10, 20, 30), oracle) < 1e-9


def test_euler_matrix_composition_oracle():
    def rx(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])

    def ry(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])

    def rz(a):
        c, s = math.cos(a), math.sin(a)
        return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])

    r, p, y = (math.radians(v) for v in (10, 20, 30))
    assert np.allclose(euler_to_quat(10, 20, 30).to_matrix(), rz(y) @ ry(p) @ rx(r), atol=1e-14)


def test_quat_to_euler_examples():
    assert tuple(quat_to_euler(Quaternion.identity())) == (0.0, 0.0, 0.0)
    assert quat_to_euler(euler_to_quat(5, -3, 12)) == pytest.approx((5, -3, 12), abs=1e-9)
    locked = quat_to_euler(euler_to_quat(20, 90, 0))
    assert locked.gimbal_lock
    assert locked.pitch == 90.0 and locked.yaw == 0.0
    assert locked.roll == pytest.approx(20, abs=1e-6)
    # yaw folds into roll at lock: Rz(y)Ry(90)Rx(r) == Ry(90)Rx(r - y)
    folded = quat_to_euler(euler_to_quat(20, 90, 5))
    assert folded.roll == pytest.approx(15, abs=1e-6) and folded.yaw == 0.0
    neg = quat_to_euler(euler_to_quat(20, -90, 5))
    assert neg.gimbal_lock and neg.pitch == -90.0
    assert angular_distance(euler_to_quat(*neg), euler_to_quat(20, -90, 5)) < 1e-6
    assert not quat_to_euler(euler_to_quat(0, 80, 0)).gimbal_lock


def test_text_round_trip():
    rng = np.random.default_rng(3)
    t = random_transform(rng)
    back = RigidTransform.from_text(t.to_text())
    assert back.rotation == t.rotation and back.translation == t.translation
    with pytest.raises(GeometryError):
        RigidTransform.from_text("1 0 0 0 1 2")


def test_from_matrix_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(20):
        t = random_transform(rng)
        assert_transform_close(RigidTransform.from_matrix(t.matrix()), t, 1e-12)


angles = st.floats(-180, 180, allow_nan=False)
pitches = st.floats(-85, 85, allow_nan=False)


@settings(max_examples=300, deadline=None)
@given(angles, pitches, angles)
def test_euler_round_trip_property(roll, pitch, yaw):
    back = quat_to_euler(euler_to_quat(roll, pitch, yaw))
    for got, want in zip(back, (roll, pitch, yaw)):
        assert abs((got - want + 180.0) % 360.0 - 180.0) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_associativity_and_isometry(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_transform(rng) for _ in range(3))
    assert_transform_close(compose(compose(a, b), c), compose(a, compose(b, c)))
    x, y = rng.normal(size=(2, 3)) * 10
    out = a.transform_points(np.stack([x, y]))
    assert abs(np.linalg.norm(out[0] - out[1]) - np.linalg.norm(x - y)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_angular_distance_metric(seed):
    rng = np.random.default_rng(seed)
    qs = [random_transform(rng).rotation for _ in range(3)]
    a, b, c = qs
    assert angular_distance(a, b) == pytest.approx(angular_distance(b, a), abs=1e-12)
    assert angular_distance(a, c) <= angular_distance(a, b) + angular_distance(b, c) + 1e-7
    assert 0 <= angular_distance(a, b) <= 180
