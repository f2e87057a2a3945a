import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trical.dataset import (
    DSEC_MEAN,
    DSEC_STD,
    KITTI_MEAN,
    KITTI_STD,
    DatasetError,
    EventStream,
    SceneConfig,
    accumulate_events,
    clip_points,
    destandardize_image,
    in_image_fraction,
    load_events,
    load_frame,
    load_point_cloud,
    resample_points,
    save_frame,
    standardize_image,
    synth_scene,
    write_events,
    write_point_cloud,
)
from trical.geometry import PointCloud, Quaternion, RigidTransform
from trical.rng import substream

IDENT = RigidTransform.identity()


def test_clip_points_examples():
    pc = PointCloud([[0, 0, -1], [0, 0, 40], [0, 0, 100]])
    out = clip_points(pc, IDENT, 80.0)
    assert out.points.tolist() == [[0, 0, 40]]
    with pytest.raises(DatasetError, match="no visible points"):
        clip_points(PointCloud([[0, 0, -1], [1, 1, -5]]), IDENT, 80.0)


def test_clip_points_matches_filter_oracle():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-100, 100, (2000, 3))
    t = RigidTransform(Quaternion(0.5, 0.5, 0.5, 0.5), (1.0, -2.0, 3.0), "lidar", "cam")
    out = clip_points(PointCloud(pts, "lidar"), t, 80.0)
    cam = pts @ t.rotation_matrix().T + t.t
    expected = [p for p in cam if 0 < p[2] <= 80.0]
    assert np.array_equal(out.points, np.array(expected))
    assert out.frame == "cam"


def test_resample_down_up_equal():
    rng = np.random.default_rng(1)
    big = PointCloud(rng.normal(size=(25_000, 3)))
    down = resample_points(big, 20_000, rng)
    assert len(down) == 20_000
    assert len(np.unique(down.points, axis=0)) == 20_000
    small = PointCloud(rng.normal(size=(3_000, 3)))
    up = resample_points(small, 5_000, rng)
    assert len(up) == 5_000
    assert np.array_equal(up.points[:3000], small.points)
    assert len(np.unique(up.points, axis=0)) == 3000
    same = resample_points(small, 3_000, rng)
    assert np.array_equal(same.points, small.points)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_resample_size_and_membership(m, n, seed):
    rng = np.random.default_rng(seed)
    pc = PointCloud(rng.normal(size=(m, 3)))
    out = resample_points(pc, n, rng)
    assert len(out) == n
    originals = {tuple(p) for p in pc.points}
    assert all(tuple(p) in originals for p in out.points)


def test_accumulate_events_examples():
    assert not accumulate_events(EventStream.empty(8, 6), 0, 100, 8, 6).any()
    es = EventStream([10], [3], [4], [1], 8, 6)
    img = accumulate_events(es, 0, 100, 8, 6)
    assert img[4, 3, 0] == 1 and img.sum() == 1


def test_accumulate_events_half_open_window():
    es = EventStream([-50, 0, 49, 50], [0, 1, 2, 3], [0, 0, 0, 0], [1, -1, 1, 1], 4, 1)
    img = accumulate_events(es, 0, 100, 4, 1)
    assert img[0, :, 0].tolist() == [1, 0, 1, 0]
    assert img[0, 1, 1] == 1


def test_accumulate_events_matches_histogram_oracle():
    rng = np.random.default_rng(2)
    n = 1000
    t = np.sort(rng.integers(0, 100_000, n))
    x, y = rng.integers(0, 20, n), rng.integers(0, 10, n)
    p = rng.choice([-1, 1], n)
    es = EventStream(t, x, y, p, 20, 10)
    img = accumulate_events(es, 50_000, 50_000, 20, 10)
    expected = np.zeros((10, 20, 2))
    in_window = 0
    for ti, xi, yi, pi in zip(t, x, y, p):
        if 25_000 <= ti < 75_000:
            expected[yi, xi, 0 if pi > 0 else 1] += 1
            in_window += 1
    assert np.array_equal(img, expected)
    assert img.sum() == in_window


def test_event_stream_validation():
    with pytest.raises(DatasetError, match="non-monotone"):
        EventStream([5, 4], [0, 0], [0, 0], [1, 1], 2, 2)
    with pytest.raises(DatasetError):
        EventStream([1], [5], [0], [1], 2, 2)


def test_standardize_examples():
    px = np.array(KITTI_MEAN).reshape(1, 1, 3)
    assert np.allclose(standardize_image(px, KITTI_MEAN, KITTI_STD), 0, atol=1e-15)
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(4, 5, 3))
    assert np.array_equal(standardize_image(img, (0, 0, 0), (1, 1, 1)), img)
    dsec = np.array([0.510, 0.553, 0.601]).reshape(1, 1, 3)
    assert np.allclose(standardize_image(dsec, DSEC_MEAN, DSEC_STD), 1.0, atol=1e-12)
    back = destandardize_image(standardize_image(img, DSEC_MEAN, DSEC_STD), DSEC_MEAN, DSEC_STD)
    assert np.max(np.abs(back - img)) < 1e-12
    with pytest.raises(DatasetError):
        standardize_image(img, (0, 0, 0), (1, 0, 1))


def test_point_cloud_io(tmp_path):
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(1000, 3)).astype(np.float32).astype(np.float64)
    write_point_cloud(tmp_path / "a.bin", PointCloud(pts))
    assert np.array_equal(load_point_cloud(tmp_path / "a.bin").points, pts)
    write_point_cloud(tmp_path / "a.xyz", PointCloud(pts))
    assert np.allclose(load_point_cloud(tmp_path / "a.xyz").points, pts, atol=1e-6)
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(DatasetError, match="byte offset 11988"):
        load_point_cloud(tmp_path / "t.bin")
    (tmp_path / "bad.xyz").write_text("1 2 3\n4 5\n")
    with pytest.raises(DatasetError, match="byte offset 6"):
        load_point_cloud(tmp_path / "bad.xyz")


def test_events_io(tmp_path):
    es = EventStream([1, 2, 2, 9], [0, 1, 2, 3], [1, 1, 0, 0], [1, -1, -1, 1], 4, 2)
    write_events(tmp_path / "e.csv", es)
    back = load_events(tmp_path / "e.csv", 4, 2)
    for a in ("t", "x", "y", "polarity"):
        assert np.array_equal(getattr(back, a), getattr(es, a))
    (tmp_path / "bad.csv").write_text("t_us,x,y,polarity\n5,0,0,1\n3,0,0,1\n")
    with pytest.raises(DatasetError, match="non-monotone timestamps"):
        load_events(tmp_path / "bad.csv", 4, 2)


def test_synth_scene_deterministic():
    cfg = SceneConfig(point_count=2000, width=160, height=80, fx=80, fy=80, cx=80, cy=40)
    a = synth_scene(cfg, substream(42, 1, 0))
    b = synth_scene(cfg, substream(42, 1, 0))
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.events.t, b.events.t) and np.array_equal(a.events.x, b.events.x)
    assert len(a.cloud) == 2000 and len(a.events) > 0


def test_synth_zero_motion_has_no_events():
    cfg = SceneConfig(point_count=500, width=160, height=80, fx=80, fy=80, cx=80, cy=40, motion_px=0)
    assert len(synth_scene(cfg, substream(0, 1, 0)).events) == 0


def test_synth_infeasible_config():
    with pytest.raises(DatasetError):
        synth_scene(SceneConfig(z_min=10, z_max=5), substream(0, 1, 0))


def test_synth_frustum_containment():
    cfg = SceneConfig(point_count=1000, width=160, height=80, fx=80, fy=80, cx=80, cy=40)
    for seed in range(100):
        f = synth_scene(cfg, substream(seed, 1, 0))
        assert in_image_fraction(f.cloud, f.t_li_rgb, f.k_rgb) >= 0.5
        assert in_image_fraction(f.cloud, f.t_li_ev, f.k_ev) >= 0.5


def test_scene_config_parse(tmp_path):
    (tmp_path / "s.cfg").write_text("# scene\npoint_count = 123\nz_max=40\nmotion_px=0\n")
    cfg = SceneConfig.from_file(tmp_path / "s.cfg")
    assert cfg.point_count == 123 and cfg.z_max == 40.0 and cfg.motion_px == 0.0


def test_frame_directory_round_trip(tmp_path):
    frame = synth_scene(SceneConfig(point_count=1500, objects=3), substream(9, 1, 0))
    save_frame(tmp_path / "f", frame)
    back = load_frame(tmp_path / "f")
    assert np.array_equal(back.cloud.points, frame.cloud.points)
    assert np.array_equal(back.image, frame.image)
    assert np.array_equal(back.events.t, frame.events.t) and np.array_equal(back.events.polarity, frame.events.polarity)
    assert back.t_li_rgb.to_text() == frame.t_li_rgb.to_text() and back.t_li_ev.to_text() == frame.t_li_ev.to_text()
    assert back.k_rgb == frame.k_rgb and back.t_center == frame.t_center
