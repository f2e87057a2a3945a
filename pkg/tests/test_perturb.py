import numpy as np
import pytest

from trical.geometry import (
    GeometryError,
    RigidTransform,
    compose,
    euler_to_quat,
    inverse,
    quat_to_euler,
)
from trical.perturb import (
    PerturbError,
    PerturbRange,
    StageSchedule,
    builtin_schedule,
    dual_perturb,
    load_schedule,
    miscalibrate,
    resolve_schedule,
    sample_dual,
    sample_perturbation,
)
from trical.rng import substream


def matrix_of(t: RigidTransform) -> np.ndarray:
    return t.matrix()


def test_builtin_schedules():
    five = builtin_schedule("five_stage")
    assert [(r.max_rot, r.max_trans) for r in five.ranges] == [
        (20, 150),
        (10, 100),
        (5, 50),
        (2, 20),
        (1, 10),
    ]
    two = builtin_schedule("two_stage")
    assert [(r.max_rot, r.max_trans) for r in two.ranges] == [(10, 100), (1, 10)]
    with pytest.raises(PerturbError):
        builtin_schedule("three_stage")


def test_schedule_validation():
    with pytest.raises(PerturbError):
        StageSchedule(())
    with pytest.raises(PerturbError):
        StageSchedule((PerturbRange(1, 10), PerturbRange(2, 5)))
    with pytest.raises(PerturbError):
        PerturbRange(-1, 0)


def test_schedule_file_round_trip(tmp_path):
    path = tmp_path / "sched.txt"
    path.write_text("# custom\n10 100\n\n3 30  # second\n")
    s = load_schedule(path)
    assert [(r.max_rot, r.max_trans) for r in s.ranges] == [(10, 100), (3, 30)]
    assert resolve_schedule(str(path)) == s
    path.write_text(builtin_schedule("five_stage").to_text())
    assert load_schedule(path) == builtin_schedule("five_stage")
    path.write_text("10\n")
    with pytest.raises(PerturbError):
        load_schedule(path)
    with pytest.raises(PerturbError):
        resolve_schedule("nope")


def test_zero_range_is_identity():
    t = sample_perturbation(PerturbRange(0, 0), substream(1, 2))
    assert t.translation == (0.0, 0.0, 0.0)
    assert t.rotation.as_array().tolist() == [1.0, 0.0, 0.0, 0.0]


def draws(n=10_000, r=PerturbRange(20, 150), seed=0):
    rng = substream(seed, 99)
    out = np.empty((n, 6))
    for i in range(n):
        t = sample_perturbation(r, rng)
        out[i, :3] = quat_to_euler(t.rotation)[:3]
        out[i, 3:] = t.translation
    return out


def test_draws_stay_in_bounds_and_center():
    d = draws()
    assert np.all(np.abs(d[:, :3]) <= 20 + 1e-9)
    assert np.all(np.abs(d[:, 3:]) <= 1.5)
    # uniform on [-a, a] has standard deviation a / sqrt(3)
    sigma = np.array([20, 20, 20, 1.5, 1.5, 1.5]) / np.sqrt(3) / np.sqrt(len(d))
    assert np.all(np.abs(d.mean(axis=0)) < 3 * sigma)


def test_sampling_is_reproducible():
    a = sample_perturbation(PerturbRange(5, 50), substream(3, 1, 2))
    b = sample_perturbation(PerturbRange(5, 50), substream(3, 1, 2))
    assert a.to_text() == b.to_text()


def test_miscalibrate_algebra():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gt = RigidTransform(euler_to_quat(*rng.uniform(-180, 180, 3) * [1, 0.45, 1]), tuple(rng.normal(size=3)), "lidar", "cam")
        dt = sample_perturbation(PerturbRange(20, 150), rng)
        init = miscalibrate(gt, dt)
        assert np.allclose(init.matrix(), matrix_of(dt) @ matrix_of(gt), atol=1e-12)
        rec = compose(inverse(dt.with_frames("cam", "cam")), init)
        assert np.allclose(rec.matrix(), gt.matrix(), atol=1e-9)
    ident = miscalibrate(gt, RigidTransform.identity())
    assert np.allclose(ident.matrix(), gt.matrix(), atol=1e-15)


def test_miscalibrate_frame_mismatch():
    gt = RigidTransform.identity("lidar", "rgb")
    with pytest.raises(GeometryError):
        miscalibrate(gt, RigidTransform.identity("ev", "ev"))


def test_dual_perturb_zero_range_and_determinism():
    gt_rgb = RigidTransform(euler_to_quat(1, 2, 3), (0.1, 0.2, 0.3), "lidar", "rgb")
    gt_ev = RigidTransform(euler_to_quat(3, 2, 1), (0.2, 0.2, 0.3), "lidar", "ev")
    a, b = dual_perturb(gt_rgb, gt_ev, PerturbRange(0, 0), substream(0, 1))
    assert np.allclose(a.matrix(), gt_rgb.matrix(), atol=1e-15)
    assert np.allclose(b.matrix(), gt_ev.matrix(), atol=1e-15)
    r = PerturbRange(10, 100)
    x1, y1 = dual_perturb(gt_rgb, gt_ev, r, substream(7, 3))
    x2, y2 = dual_perturb(gt_rgb, gt_ev, r, substream(7, 3))
    assert (x1.to_text(), y1.to_text()) == (x2.to_text(), y2.to_text())
    d_rgb, d_ev = sample_dual(r, substream(7, 3))
    assert d_rgb.to_text() != d_ev.to_text()


def test_dual_perturbations_are_decorrelated():
    r = PerturbRange(20, 150)
    n = 10_000
    a = np.empty((n, 6))
    b = np.empty((n, 6))
    for i in range(n):
        da, db = sample_dual(r, substream(11, i))
        a[i] = (*quat_to_euler(da.rotation)[:3], *da.translation)
        b[i] = (*quat_to_euler(db.rotation)[:3], *db.translation)
    for k in range(6):
        assert abs(np.corrcoef(a[:, k], b[:, k])[0, 1]) < 0.05
