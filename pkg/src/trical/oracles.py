"""Brute-force reference implementations and the self-check suite.

Each check compares a library routine with a slow, independently written
oracle (explicit loops, homogeneous matrices, scipy) and returns an
:class:`OracleResult`. The ``oracle`` command and the acceptance tests run the
same checks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial.transform import Rotation

from trical.costvolume import correlate
from trical.eval import CalibrationEstimate, build_report, metric_er, metric_et, oracle_model, refine_step, run_pipeline
from trical.geometry import (
    PointCloud,
    Quaternion,
    RigidTransform,
    angular_distance,
    compose,
    euler_to_quat,
    inverse,
    quat_to_euler,
)
from trical.perturb import PerturbRange, builtin_schedule, sample_dual, sample_perturbation
from trical.projection import Intrinsics, project_depth, project_features, round_half_away, scale_intrinsics
from trical.rng import substream

# KITTI-like full-resolution camera used by the projection checks
KITTI = Intrinsics(718.856, 718.856, 607.1928, 185.2157, 1240, 376)


@dataclass(frozen=True)
class OracleResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f} s)"


def timed(name: str, fn: Callable[[], tuple[bool, str]]) -> OracleResult:
    start = time.perf_counter()
    ok, detail = fn()
    return OracleResult(name, bool(ok), detail, time.perf_counter() - start)


# --- reference implementations ----------------------------------------------


def loop_correlate(f_li: np.ndarray, f_cam: np.ndarray, d: int) -> np.ndarray:
    """Cost volume by explicit loops over displacement and pixel."""
    c, h, w = f_li.shape
    out = np.zeros(((2 * d + 1) ** 2, h, w))
    m = 0
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            for y in range(h):
                for x in range(w):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[m, y, x] = float(np.dot(f_li[:, y, x], f_cam[:, yy, xx])) / c
            m += 1
    return out


def _round_half_away(v: float) -> int:
    return int(math.floor(v + 0.5)) if v >= 0 else -int(math.floor(-v + 0.5))


def zbuffer_winners(points: np.ndarray, k, w: int, h: int) -> dict:
    """{(v, u): point index} keeping the nearest point, lowest index on ties."""
    best: dict = {}
    for i, (x, y, z) in enumerate(points):
        u = _round_half_away(k.fx * x / z + k.cx)
        v = _round_half_away(k.fy * y / z + k.cy)
        if 0 <= u < w and 0 <= v < h:
            j = best.get((v, u))
            if j is None or z < points[j, 2]:
                best[(v, u)] = i
    return best


def raster_depth(points: np.ndarray, k, w: int, h: int) -> np.ndarray:
    depth = np.zeros((h, w))
    for (v, u), i in zbuffer_winners(points, k, w, h).items():
        depth[v, u] = points[i, 2]
    return depth


def raster_features(points: np.ndarray, feats: np.ndarray, k, w: int, h: int) -> np.ndarray:
    grid = np.zeros((feats.shape[1], h, w))
    for (v, u), i in zbuffer_winners(points, k, w, h).items():
        grid[:, v, u] = feats[i]
    return grid


def homogeneous(t: RigidTransform) -> np.ndarray:
    """4x4 matrix built through scipy (scalar-last quaternions)."""
    w, x, y, z = t.rotation.as_array()
    m = np.eye(4)
    m[:3, :3] = Rotation.from_quat([x, y, z, w]).as_matrix()
    m[:3, 3] = t.translation
    return m


def random_transform(rng: np.random.Generator, max_t: float = 5.0) -> RigidTransform:
    q = rng.normal(size=4)
    return RigidTransform(Quaternion.from_array(q / np.linalg.norm(q)), tuple(rng.uniform(-max_t, max_t, 3)))


def _same_transform(a: RigidTransform, b: RigidTransform) -> float:
    qa, qb = a.rotation.as_array(), b.rotation.as_array()
    if np.dot(qa, qb) < 0:
        qb = -qb
    return float(max(np.max(np.abs(qa - qb)), np.max(np.abs(a.t - b.t))))


# --- checks ------------------------------------------------------------------


def check_costvolume(seed: int = 0, n: int = 20) -> OracleResult:
    def run():
        rng = substream(seed, 0xC0)
        worst, m = 0.0, 0
        for _ in range(n):
            a, b = rng.normal(size=(2, 8, 16, 32))
            cv = correlate(a, b, 4)
            m = cv.shape[0]
            worst = max(worst, float(np.max(np.abs(cv - loop_correlate(a, b, 4)))))
        return worst < 1e-12 and m == 81, f"{n} pairs, M={m}, max dev {worst:.2e}"

    return timed("cost volume vs triple loop", run)


def check_projection(seed: int = 0, n_clouds: int = 100, n_points: int = 1000, n_sdp: int = 10_000) -> OracleResult:
    def run():
        rng = substream(seed, 0xC1)
        k_in = scale_intrinsics(KITTI, 512, 256)
        k_ft = scale_intrinsics(KITTI, 32, 16)
        mismatches = 0
        for _ in range(n_clouds):
            pts = np.column_stack(
                [rng.uniform(-20, 20, n_points), rng.uniform(-5, 5, n_points), rng.uniform(0.5, 60, n_points)]
            )
            feats = rng.normal(size=(n_points, 5))
            pc = PointCloud(pts)
            if not np.array_equal(project_depth(pc, k_in, 512, 256), raster_depth(pts, k_in, 512, 256)):
                mismatches += 1
            if not np.array_equal(project_features(pc, feats, k_ft, 32, 16), raster_features(pts, feats, k_ft, 32, 16)):
                mismatches += 1
        pts = np.column_stack([rng.uniform(-20, 20, n_sdp), rng.uniform(-5, 5, n_sdp), rng.uniform(0.5, 60, n_sdp)])
        u_full = KITTI.fx * pts[:, 0] / pts[:, 2] + KITTI.cx
        v_full = KITTI.fy * pts[:, 1] / pts[:, 2] + KITTI.cy
        du = np.abs(round_half_away(k_in.fx * pts[:, 0] / pts[:, 2] + k_in.cx) - u_full * 512 / KITTI.width)
        dv = np.abs(round_half_away(k_in.fy * pts[:, 1] / pts[:, 2] + k_in.cy) - v_full * 256 / KITTI.height)
        bound = float(max(du.max(), dv.max()))
        ok = mismatches == 0 and bound <= 0.5 + 1e-9
        return ok, f"{n_clouds} clouds x {n_points} pts, {mismatches} mismatches; SDP max offset {bound:.4f} px on {n_sdp} pts"

    return timed("projection vs brute-force rasterizers", run)


def _homogeneous_batch(q: np.ndarray, t: np.ndarray) -> np.ndarray:
    m = np.tile(np.eye(4), (len(q), 1, 1))
    m[:, :3, :3] = Rotation.from_quat(q[:, [1, 2, 3, 0]]).as_matrix()
    m[:, :3, 3] = t
    return m


def check_geometry(seed: int = 0, n: int = 10_000) -> OracleResult:
    def run():
        rng = substream(seed, 0xC2)
        q = rng.normal(size=(n, 3, 4))
        q /= np.linalg.norm(q, axis=2, keepdims=True)
        t = rng.uniform(-5, 5, (n, 3, 3))
        x = rng.normal(size=(n, 2, 3)) * 10
        ang = np.column_stack([rng.uniform(-180, 180, n), rng.uniform(-89, 89, n), rng.uniform(-180, 180, n)])
        ab_oracle = _homogeneous_batch(q[:, 0], t[:, 0]) @ _homogeneous_batch(q[:, 1], t[:, 1])
        worst = {"assoc": 0.0, "inverse": 0.0, "isometry": 0.0, "double cover": 0.0, "matrix": 0.0, "euler": 0.0}
        eye = np.eye(4)
        for i in range(n):
            a, b, c = (RigidTransform(Quaternion.from_array(q[i, j]), tuple(t[i, j])) for j in range(3))
            ab = compose(a, b)
            worst["assoc"] = max(worst["assoc"], _same_transform(compose(ab, c), compose(a, compose(b, c))))
            worst["inverse"] = max(worst["inverse"], float(np.max(np.abs(compose(a, inverse(a)).matrix() - eye))))
            y = a.transform_points(x[i])
            worst["isometry"] = max(worst["isometry"], abs(np.linalg.norm(y[0] - y[1]) - np.linalg.norm(x[i, 0] - x[i, 1])))
            flipped = RigidTransform(-a.rotation, tuple(t[i, 0]))
            cover = max(float(np.max(np.abs(flipped.matrix() - a.matrix()))), angular_distance(a.rotation, -a.rotation))
            worst["double cover"] = max(worst["double cover"], cover)
            worst["matrix"] = max(worst["matrix"], float(np.max(np.abs(ab.matrix() - ab_oracle[i]))))
            back = quat_to_euler(euler_to_quat(*ang[i]))
            err = max(abs((g - e + 180.0) % 360.0 - 180.0) for g, e in zip(back[:3], ang[i]))
            worst["euler"] = max(worst["euler"], err)
        tol = {"assoc": 1e-9, "inverse": 1e-9, "isometry": 1e-9, "double cover": 1e-9, "matrix": 1e-9, "euler": 1e-6}
        ok = all(worst[k] < tol[k] for k in worst)
        return ok, f"{n} instances; " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())

    return timed("SE(3) and quaternion algebra", run)


def check_telescope(seed: int = 0) -> OracleResult:
    def run():
        rng = substream(seed, 0xC3)
        init = random_transform(rng)
        est = CalibrationEstimate.start("rgb", init)
        chain = homogeneous(init)
        for _ in range(5):
            delta = random_transform(rng)
            est = refine_step(est, delta)
            chain = homogeneous(delta) @ chain
        dev = float(np.max(np.abs(est.extrinsic.matrix() - chain)))
        gt = {
            "rgb": RigidTransform(euler_to_quat(*rng.uniform(-30, 30, 3)), tuple(rng.normal(size=3)), "lidar", "rgb"),
            "ev": RigidTransform(euler_to_quat(*rng.uniform(-30, 30, 3)), tuple(rng.normal(size=3)), "lidar", "ev"),
        }
        sched = builtin_schedule("five_stage")
        rep = build_report([run_pipeline(gt, sched, [oracle_model(gt)] * len(sched), substream(seed, 0xC4))])
        final = [rep.row(p, len(sched)) for p in ("rgb", "ev")]
        e_t = max(r.e_t for r in final)
        e_r = max(r.e_r for r in final)
        # composing a transform with its own inverse is exact only up to roundoff
        ok = dev < 1e-9 and e_t < 1e-9 and e_r < 1e-9
        return ok, f"matrix chain dev {dev:.1e}; oracle stages leave e_t {e_t:.1e} cm, e_r {e_r:.1e} deg"

    return timed("refinement telescope", run)


FIVE_STAGE = [(20, 150), (10, 100), (5, 50), (2, 20), (1, 10)]
TWO_STAGE = [(10, 100), (1, 10)]


def check_perturbation(seed: int = 0, n: int = 10_000) -> OracleResult:
    def run():
        r = PerturbRange(20, 150)
        rng = substream(seed, 0xC5)
        worst_rot, worst_trans = 0.0, 0.0
        for _ in range(n):
            dt = sample_perturbation(r, rng)
            worst_rot = max(worst_rot, max(abs(v) for v in quat_to_euler(dt.rotation)[:3]))
            worst_trans = max(worst_trans, float(np.max(np.abs(dt.t))))
        in_bounds = worst_rot <= 20 + 1e-9 and worst_trans <= 1.5
        lists = (
            [(x.max_rot, x.max_trans) for x in builtin_schedule("five_stage").ranges] == FIVE_STAGE
            and [(x.max_rot, x.max_trans) for x in builtin_schedule("two_stage").ranges] == TWO_STAGE
        )
        a1, b1 = sample_dual(r, substream(seed, 0xC6))
        a2, b2 = sample_dual(r, substream(seed, 0xC6))
        repro = (a1.to_text(), b1.to_text()) == (a2.to_text(), b2.to_text())
        m = n
        xa, xb = np.empty((m, 6)), np.empty((m, 6))
        for i in range(m):
            da, db = sample_dual(r, substream(seed, 0xC7, i))
            xa[i] = (*quat_to_euler(da.rotation)[:3], *da.t)
            xb[i] = (*quat_to_euler(db.rotation)[:3], *db.t)
        rho = max(abs(np.corrcoef(xa[:, k], xb[:, k])[0, 1]) for k in range(6))
        ok = in_bounds and lists and repro and rho < 0.05
        detail = (
            f"{n} draws max |angle| {worst_rot:.3f} deg, max |t| {worst_trans * 100:.2f} cm; "
            f"schedules {'match' if lists else 'DIFFER'}; dual {'reproducible' if repro else 'NOT reproducible'}, max |rho| {rho:.3f}"
        )
        return ok, detail

    return timed("perturbation protocol", run)


def check_metrics(seed: int = 0) -> OracleResult:
    def run():
        rng = substream(seed, 0xC8)
        ts = rng.normal(size=(10, 3))
        qs = [random_transform(rng).rotation for _ in range(10)]
        others = [random_transform(rng).rotation for _ in range(10)]
        flip = metric_er([-q for q in qs], others) == metric_er(qs, others)
        cm = metric_et([(0.03, 0.04, 0.0)], [(0.0, 0.0, 0.0)])
        ok = metric_et(ts, ts) == 0 and metric_er(qs, qs) == 0 and flip and cm == 5.0
        return ok, f"e_t(t,t)={metric_et(ts, ts)}, e_r(q,q)={metric_er(qs, qs)}, sign flip {'invariant' if flip else 'VARIES'}, 3-4-5 -> {cm!r} cm"

    return timed("metric identities", run)


def run_all(seed: int = 0) -> list[OracleResult]:
    return [
        check_costvolume(seed),
        check_projection(seed),
        check_geometry(seed),
        check_telescope(seed),
        check_perturbation(seed),
        check_metrics(seed),
    ]
