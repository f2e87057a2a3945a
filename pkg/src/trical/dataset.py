"""Input preprocessing, file formats and the synthetic tri-modal scene generator."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from trical.geometry import PointCloud, Quaternion, RigidTransform, apply, compose, euler_to_quat, inverse
from trical.projection import Intrinsics, project_pixels, read_ppm, write_ppm

KITTI_MEAN = (0.485, 0.456, 0.406)
KITTI_STD = (0.229, 0.224, 0.225)
DSEC_MEAN = (0.265, 0.283, 0.300)
DSEC_STD = (0.245, 0.270, 0.301)
Z_MAX = 80.0
EVENT_WINDOW_US = 50_000


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EventStream:
    t: np.ndarray  # microseconds, int64
    x: np.ndarray
    y: np.ndarray
    polarity: np.ndarray  # +1 / -1
    width: int
    height: int

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).ravel()
        x = np.asarray(self.x, dtype=np.int64).ravel()
        y = np.asarray(self.y, dtype=np.int64).ravel()
        p = np.asarray(self.polarity, dtype=np.int8).ravel()
        if not (t.size == x.size == y.size == p.size):
            raise DatasetError("event arrays differ in length")
        if t.size:
            if np.any(np.diff(t) < 0):
                raise DatasetError("non-monotone timestamps")
            if x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height:
                raise DatasetError("event coordinates outside the sensor")
            if not np.all(np.abs(p) == 1):
                raise DatasetError("polarity must be +1 or -1")
        for name, arr in (("t", t), ("x", x), ("y", y), ("polarity", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return self.t.size

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height)


# --- preprocessing --------------------------------------------------------


def clip_points(pc: PointCloud, t_cam: RigidTransform, z_max: float = Z_MAX) -> PointCloud:
    """Move the cloud into the camera frame and keep points with 0 < z <= z_max."""
    if not z_max > 0:
        raise DatasetError("z_max must be positive")
    cam = apply(t_cam, pc)
    z = cam.points[:, 2]
    keep = (z > 0) & (z <= z_max)
    if not np.any(keep):
        raise DatasetError("no visible points")
    return PointCloud(cam.points[keep], cam.frame)


def resample_points(pc: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Random subset without replacement, or the cloud plus random duplicates."""
    m = len(pc)
    if m == 0 or n < 1:
        raise DatasetError("resampling needs a non-empty cloud and n >= 1")
    if m == n:
        return pc
    if m > n:
        idx = rng.choice(m, size=n, replace=False)
    else:
        idx = np.concatenate([np.arange(m), rng.integers(0, m, size=n - m)])
    return PointCloud(pc.points[idx], pc.frame)


def accumulate_events(es: EventStream, t_center: int, window: int, w: int, h: int) -> np.ndarray:
    """(h, w, 2) counts of positive (channel 0) and negative (channel 1) events
    with timestamps in ``[t_center - window/2, t_center + window/2)``."""
    if not window > 0:
        raise DatasetError("window must be positive")
    out = np.zeros((h, w, 2))
    if len(es) == 0:
        return out
    lo = t_center - window / 2.0
    hi = t_center + window / 2.0
    sel = (es.t >= lo) & (es.t < hi) & (es.x < w) & (es.y < h)
    ch = (es.polarity[sel] < 0).astype(np.int64)
    np.add.at(out, (es.y[sel], es.x[sel], ch), 1.0)
    return out


def standardize_image(img: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise DatasetError("standard deviation must be positive")
    return (np.asarray(img, dtype=np.float64) - mean) / std


def destandardize_image(img: np.ndarray, mean, std) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) * np.asarray(std) + np.asarray(mean)


# --- file formats -----------------------------------------------------------


def write_point_cloud(path, pc: PointCloud) -> None:
    path = Path(path)
    if path.suffix == ".xyz":
        with open(path, "w") as f:
            for x, y, z in pc.points:
                f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
    else:
        path.write_bytes(np.asarray(pc.points, dtype="<f4").tobytes())


def load_point_cloud(path, frame: Optional[str] = None) -> PointCloud:
    path = Path(path)
    if path.suffix == ".xyz":
        pts = []
        offset = 0
        with open(path, "rb") as f:
            for line in f:
                parts = line.split()
                if parts:
                    if len(parts) != 3:
                        raise DatasetError(f"{path}: malformed record at byte offset {offset}")
                    try:
                        pts.append([float(v) for v in parts])
                    except ValueError:
                        raise DatasetError(f"{path}: malformed record at byte offset {offset}") from None
                offset += len(line)
        return PointCloud(np.array(pts).reshape(-1, 3), frame)
    data = path.read_bytes()
    if len(data) % 12:
        raise DatasetError(f"{path}: truncated record at byte offset {len(data) - len(data) % 12}")
    return PointCloud(np.frombuffer(data, dtype="<f4").reshape(-1, 3).astype(np.float64), frame)


def write_events(path, es: EventStream) -> None:
    buf = io.StringIO()
    buf.write("t_us,x,y,polarity\n")
    for t, x, y, p in zip(es.t.tolist(), es.x.tolist(), es.y.tolist(), es.polarity.tolist()):
        buf.write(f"{t},{x},{y},{p}\n")
    Path(path).write_text(buf.getvalue())


def load_events(path, width: int, height: int) -> EventStream:
    cols = ([], [], [], [])
    offset = 0
    prev_t = None
    with open(path, "rb") as f:
        for lineno, line in enumerate(f):
            text = line.strip()
            if lineno == 0 and text.startswith(b"t"):
                offset += len(line)
                continue
            if text:
                parts = text.split(b",")
                try:
                    t, x, y, p = (int(v) for v in parts)
                except ValueError:
                    raise DatasetError(f"{path}: malformed record at byte offset {offset}") from None
                if p not in (1, -1):
                    raise DatasetError(f"{path}: bad polarity at byte offset {offset}")
                if prev_t is not None and t < prev_t:
                    raise DatasetError(f"{path}: non-monotone timestamps at byte offset {offset}")
                prev_t = t
                for c, v in zip(cols, (t, x, y, p)):
                    c.append(v)
            offset += len(line)
    return EventStream(*(np.array(c, dtype=np.int64) for c in cols), width, height)


# --- synthetic scenes -------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    point_count: int = 8000
    z_min: float = 3.0
    z_max: float = 30.0
    width: int = 640
    height: int = 320
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 160.0
    seed: int = 0
    motion_px: float = 2.0
    frames: int = 8
    objects: int = 10
    event_threshold: float = 0.05
    camera_height: float = 1.6
    fov_margin: float = 0.15

    @classmethod
    def from_file(cls, path) -> "SceneConfig":
        return cls.from_mapping(read_key_values(path))

    @classmethod
    def from_mapping(cls, kv: dict) -> "SceneConfig":
        known = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, val in kv.items():
            if key not in known:
                continue
            default = getattr(cls, key)
            args[key] = type(default)(float(val)) if isinstance(default, int) else float(val)
        return cls(**args)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


def read_key_values(path) -> dict:
    kv = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{n}: expected key=value")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    return kv


# LiDAR axes (x fwd, y left, z up) -> camera axes (x right, y down, z fwd)
_LIDAR_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_extrinsics() -> tuple[RigidTransform, RigidTransform]:
    """Ground-truth LiDAR->RGB and LiDAR->event transforms of the synthetic rig."""
    mount = euler_to_quat(0.8, -1.2, 0.5).to_matrix() @ _LIDAR_TO_CAM
    m = np.eye(4)
    m[:3, :3] = mount
    m[:3, 3] = (0.06, -0.08, -0.27)
    t_li_rgb = RigidTransform.from_matrix(m, "lidar", "rgb")
    t_rgb_ev = RigidTransform(Quaternion.identity(), (-0.10, 0.0, 0.0), "rgb", "ev")
    return t_li_rgb, compose(t_rgb_ev, t_li_rgb)


@dataclass(frozen=True, eq=False)
class SyntheticFrame:
    cloud: PointCloud
    image: np.ndarray  # (H, W, 3) in [0, 1]
    events: EventStream
    t_li_rgb: RigidTransform
    t_li_ev: RigidTransform
    k_rgb: Intrinsics
    k_ev: Intrinsics
    t_center: int = EVENT_WINDOW_US // 2


@dataclass
class _Scene:
    # rectangles facing the camera: center (x, y, z), half sizes, albedo rgb, stripe frequency
    centers: np.ndarray
    half: np.ndarray
    albedo: np.ndarray
    freq: np.ndarray
    ground_albedo: np.ndarray
    camera_height: float
    z_max: float


def _make_scene(cfg: SceneConfig, rng: np.random.Generator) -> _Scene:
    n = cfg.objects
    z = rng.uniform(cfg.z_min, cfg.z_max, n)
    half_fov_x = (cfg.width / 2.0) / cfg.fx * (1 + 2 * cfg.fov_margin)
    x = rng.uniform(-1, 1, n) * half_fov_x * z
    half = np.stack([rng.uniform(0.4, 2.5, n), rng.uniform(0.5, 2.5, n)], axis=1)
    # objects stand on the ground plane
    y = cfg.camera_height - half[:, 1]
    return _Scene(
        centers=np.stack([x, y, z], axis=1),
        half=half,
        albedo=rng.uniform(0.25, 1.0, (n, 3)),
        freq=rng.uniform(0.5, 3.0, n),
        ground_albedo=rng.uniform(0.3, 0.6, 3),
        camera_height=cfg.camera_height,
        z_max=cfg.z_max,
    )


def _raycast(scene: _Scene, dirs: np.ndarray):
    """Nearest hit along camera-frame rays ``dirs`` (M, 3) with dirs[:, 2] == 1.

    Returns depth (inf for no hit), surface id (-1 ground, -2 none) and the
    in-surface texture coordinate.
    """
    m = dirs.shape[0]
    depth = np.full(m, np.inf)
    sid = np.full(m, -2, dtype=np.int64)
    tex = np.zeros(m)
    # ground plane y = camera_height
    with np.errstate(divide="ignore"):
        zg = np.where(dirs[:, 1] > 1e-9, scene.camera_height / dirs[:, 1], np.inf)
    ok = zg <= scene.z_max
    depth[ok] = zg[ok]
    sid[ok] = -1
    tex[ok] = dirs[ok, 0] * zg[ok]
    for i, (c, hs) in enumerate(zip(scene.centers, scene.half)):
        zc = c[2]
        px = dirs[:, 0] * zc
        py = dirs[:, 1] * zc
        hit = (np.abs(px - c[0]) <= hs[0]) & (np.abs(py - c[1]) <= hs[1]) & (zc < depth)
        depth[hit] = zc
        sid[hit] = i
        tex[hit] = px[hit] - c[0] + py[hit] - c[1]
    return depth, sid, tex


def _shade(scene: _Scene, depth, sid, tex, v_norm) -> np.ndarray:
    """Depth-shaded, striped albedo with a smooth sky gradient."""
    out = np.empty(depth.shape + (3,))
    sky = sid == -2
    out[sky] = (0.55 + 0.35 * (1 - v_norm[sky]))[:, None] * np.array([0.75, 0.85, 1.0])
    hit = ~sky
    shade = 0.35 + 0.65 * np.exp(-depth[hit] / 12.0)
    albedo = np.where(sid[hit, None] >= 0, scene.albedo[np.maximum(sid[hit], 0)], scene.ground_albedo)
    freq = np.where(sid[hit] >= 0, scene.freq[np.maximum(sid[hit], 0)], 0.7)
    stripe = 0.8 + 0.2 * np.sign(np.sin(2 * np.pi * freq * tex[hit]))
    out[hit] = albedo * (shade * stripe)[:, None]
    return np.clip(out, 0.0, 1.0)


def _render(scene: _Scene, k: Intrinsics, rot: Optional[np.ndarray] = None) -> np.ndarray:
    """Image seen by a camera at the scene origin, optionally rotated by ``rot``
    (camera-to-scene rotation)."""
    u, v = np.meshgrid(np.arange(k.width) + 0.0, np.arange(k.height) + 0.0)
    d = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
    if rot is not None:
        d = d @ rot.T
        d = d / d[:, 2:3]
    depth, sid, tex = _raycast(scene, d)
    img = _shade(scene, depth, sid, tex, (v.ravel() / k.height))
    return img.reshape(k.height, k.width, 3)


def _luma(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def synth_events(
    before: np.ndarray, after: np.ndarray, threshold: float, t_center: int, rng: np.random.Generator
) -> EventStream:
    """One event per threshold crossing of the luminance change, times spread over the window."""
    diff = _luma(after) - _luma(before)
    h, w = diff.shape
    counts = np.floor(np.abs(diff) / threshold).astype(np.int64)
    ys, xs = np.nonzero(counts)
    if ys.size == 0:
        return EventStream.empty(w, h)
    reps = counts[ys, xs]
    ex = np.repeat(xs, reps)
    ey = np.repeat(ys, reps)
    ep = np.repeat(np.sign(diff[ys, xs]).astype(np.int64), reps)
    lo = t_center - EVENT_WINDOW_US // 2
    et = rng.integers(lo, lo + EVENT_WINDOW_US, size=ex.size)
    order = np.argsort(et, kind="stable")
    return EventStream(et[order], ex[order], ey[order], ep[order], w, h)


def synth_scene(cfg: SceneConfig, rng: np.random.Generator) -> SyntheticFrame:
    """Generate one synthetic LiDAR / RGB / event frame.

    The scene (ground plane plus textured upright rectangles) lives in the RGB
    camera frame. LiDAR returns are ray hits sampled over the image area widened
    by ``fov_margin`` on every side, then expressed in the LiDAR frame. The
    event stream is the thresholded luminance change caused by a small virtual
    pan of the event camera that shifts the image by ``motion_px`` pixels.
    """
    if not (0 < cfg.z_min < cfg.z_max):
        raise DatasetError("infeasible config: empty depth range")
    if cfg.point_count < 1 or cfg.width < 2 or cfg.height < 2:
        raise DatasetError("infeasible config: sizes must be positive")
    k = cfg.intrinsics()
    t_li_rgb, t_li_ev = default_extrinsics()
    scene = _make_scene(cfg, rng)

    m = cfg.fov_margin
    pts = np.zeros((0, 3))
    for _ in range(50):
        need = cfg.point_count - pts.shape[0]
        if need <= 0:
            break
        u = rng.uniform(-m * k.width, (1 + m) * k.width, 2 * need)
        v = rng.uniform(-m * k.height, (1 + m) * k.height, 2 * need)
        d = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=1)
        depth, _, _ = _raycast(scene, d)
        ok = np.isfinite(depth) & (depth >= cfg.z_min)
        pts = np.vstack([pts, d[ok] * depth[ok, None]])
    if pts.shape[0] < cfg.point_count:
        raise DatasetError("infeasible config: scene yields too few LiDAR returns")
    pts = pts[: cfg.point_count]
    cloud = apply(inverse(t_li_rgb), PointCloud(pts, "rgb"))
    # stored clouds are float32
    cloud = PointCloud(cloud.points.astype(np.float32).astype(np.float64), "lidar")

    # stored images are 8-bit
    image = np.round(np.clip(_render(scene, k), 0.0, 1.0) * 255.0) / 255.0

    # event camera: same intrinsics, offset by the known RGB->event baseline
    t_rgb_ev = compose(t_li_ev, inverse(t_li_rgb))
    ev_scene = _shift_scene(scene, t_rgb_ev.t)
    ev_before = _render(ev_scene, k)
    t_center = EVENT_WINDOW_US // 2
    if cfg.motion_px == 0:
        events = EventStream.empty(k.width, k.height)
    else:
        yaw = math.atan2(cfg.motion_px, cfg.fx)
        pan = np.array([[math.cos(yaw), 0, math.sin(yaw)], [0, 1, 0], [-math.sin(yaw), 0, math.cos(yaw)]])
        ev_after = _render(ev_scene, k, pan)
        events = synth_events(ev_before, ev_after, cfg.event_threshold, t_center, rng)
    return SyntheticFrame(cloud, image, events, t_li_rgb, t_li_ev, k, k, t_center)


def _intrinsics_text(k: Intrinsics) -> str:
    return f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}"


def save_frame(directory, frame: SyntheticFrame) -> list[Path]:
    """Write a frame as points.bin, image.ppm, events.csv and calib.txt."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_point_cloud(d / "points.bin", frame.cloud)
    write_ppm(d / "image.ppm", np.round(np.clip(frame.image, 0.0, 1.0) * 255.0).astype(np.uint8))
    write_events(d / "events.csv", frame.events)
    (d / "calib.txt").write_text(
        f"t_li_rgb={frame.t_li_rgb.to_text()}\n"
        f"t_li_ev={frame.t_li_ev.to_text()}\n"
        f"k_rgb={_intrinsics_text(frame.k_rgb)}\n"
        f"k_ev={_intrinsics_text(frame.k_ev)}\n"
        f"t_center={frame.t_center}\n"
    )
    return [d / n for n in FRAME_FILES]


FRAME_FILES = ("points.bin", "image.ppm", "events.csv", "calib.txt")


def _parse_intrinsics(text: str, path) -> Intrinsics:
    parts = text.split()
    if len(parts) != 6:
        raise DatasetError(f"{path}: intrinsics need 'fx fy cx cy width height'")
    return Intrinsics(*(float(v) for v in parts[:4]), int(parts[4]), int(parts[5]))


def load_frame(directory) -> SyntheticFrame:
    d = Path(directory)
    kv = read_key_values(d / "calib.txt")
    try:
        k_rgb = _parse_intrinsics(kv["k_rgb"], d / "calib.txt")
        k_ev = _parse_intrinsics(kv["k_ev"], d / "calib.txt")
        t_rgb = RigidTransform.from_text(kv["t_li_rgb"], "lidar", "rgb")
        t_ev = RigidTransform.from_text(kv["t_li_ev"], "lidar", "ev")
        t_center = int(kv["t_center"])
    except KeyError as e:
        raise DatasetError(f"{d / 'calib.txt'}: missing key {e.args[0]}") from None
    image = read_ppm(d / "image.ppm").astype(np.float64) / 255.0
    if image.shape[:2] != (k_rgb.height, k_rgb.width):
        raise DatasetError(f"{d / 'image.ppm'}: size does not match the RGB intrinsics")
    cloud = load_point_cloud(d / "points.bin", "lidar")
    events = load_events(d / "events.csv", k_ev.width, k_ev.height)
    return SyntheticFrame(cloud, image, events, t_rgb, t_ev, k_rgb, k_ev, t_center)


def _shift_scene(scene: _Scene, offset: np.ndarray) -> _Scene:
    """The same scene seen from a camera translated by -offset (pure translation rig)."""
    return _Scene(
        centers=scene.centers + offset,
        half=scene.half,
        albedo=scene.albedo,
        freq=scene.freq,
        ground_albedo=scene.ground_albedo,
        camera_height=scene.camera_height + offset[1],
        z_max=scene.z_max + offset[2],
    )


def in_image_fraction(cloud: PointCloud, t_cam: RigidTransform, k: Intrinsics) -> float:
    cam = apply(t_cam, cloud).points
    front = cam[:, 2] > 0
    if not np.any(front):
        return 0.0
    u, v = project_pixels(cam[front], k)
    inside = (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    return float(np.count_nonzero(inside)) / len(cloud)
