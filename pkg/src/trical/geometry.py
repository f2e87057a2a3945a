"""Quaternion and rigid-transform algebra.

Quaternions are stored scalar-first ``(w, x, y, z)``. Euler angles follow the
intrinsic Z-Y-X convention (yaw, then pitch, then roll), so the rotation matrix
is ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``. Angles are radians internally and
degrees at the public Euler / distance boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

UNIT_TOL = 1e-6
GIMBAL_TOL_DEG = 1e-6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Quaternion:
    w: float
    x: float
    y: float
    z: float

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "Quaternion":
        w, x, y, z = (float(v) for v in a)
        return cls(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def norm(self) -> float:
        return math.sqrt(self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z)

    def conjugate(self) -> "Quaternion":
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion.from_array(quat_multiply(self.as_array(), other.as_array()))

    def to_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.as_array())


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    # terms are paired so that conj(q) * q has an exactly zero vector part
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            (aw * bx + ax * bw) + (ay * bz - az * by),
            (aw * by + ay * bw) + (az * bx - ax * bz),
            (aw * bz + az * bw) + (ax * by - ay * bx),
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for unit quaternions of shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(np.shape(w) + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def quat_normalize(q: Quaternion) -> Quaternion:
    n = q.norm()
    if not n > 0.0 or not math.isfinite(n):
        raise GeometryError("degenerate quaternion")
    return Quaternion(q.w / n, q.x / n, q.y / n, q.z / n)


def _check_unit(q: Quaternion) -> None:
    if abs(q.norm() - 1.0) > UNIT_TOL:
        raise GeometryError(f"quaternion is not unit-norm (norm={q.norm():.9g})")


def angular_distance_rad(q1: Quaternion, q2: Quaternion) -> float:
    _check_unit(q1)
    _check_unit(q2)
    a, b = q1.as_array(), q2.as_array()
    if np.dot(a, b) < 0:
        b = -b
    # 4 atan2(|a-b|, |a+b|) == 2 acos(|<a,b>|) for unit inputs, but stays accurate near 0
    return 4.0 * math.atan2(np.linalg.norm(a - b), np.linalg.norm(a + b))


def angular_distance(q1: Quaternion, q2: Quaternion) -> float:
    """Rotation angle between two unit quaternions, in degrees, in [0, 180]."""
    return math.degrees(angular_distance_rad(q1, q2))


def euler_to_quat(roll: float, pitch: float, yaw: float) -> Quaternion:
    """Quaternion for ``Rz(yaw) Ry(pitch) Rx(roll)``; angles in degrees."""
    hr, hp, hy = (math.radians(a) / 2.0 for a in (roll, pitch, yaw))
    cr, sr = math.cos(hr), math.sin(hr)
    cp, sp = math.cos(hp), math.sin(hp)
    cy, sy = math.cos(hy), math.sin(hy)
    q = Quaternion(
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    )
    return quat_normalize(q)


class EulerAngles(NamedTuple):
    roll: float
    pitch: float
    yaw: float

    @property
    def gimbal_lock(self) -> bool:
        return abs(abs(self.pitch) - 90.0) <= GIMBAL_TOL_DEG


def quat_to_euler(q: Quaternion) -> EulerAngles:
    """Inverse of :func:`euler_to_quat`.

    At gimbal lock (pitch within 1e-6 degrees of +/-90) yaw is set to 0 and the
    whole in-plane rotation is reported as roll; ``result.gimbal_lock`` is True.
    """
    _check_unit(q)
    r = q.to_matrix()
    # atan2 form keeps pitch well conditioned near +/-90 degrees
    pitch = math.atan2(-r[2, 0], math.hypot(r[0, 0], r[1, 0]))
    pitch_deg = math.degrees(pitch)
    if abs(abs(pitch_deg) - 90.0) <= GIMBAL_TOL_DEG:
        pitch_deg = math.copysign(90.0, pitch_deg)
        if pitch_deg > 0:
            roll = math.atan2(r[0, 1], r[1, 1])
        else:
            roll = math.atan2(-r[0, 1], r[1, 1])
        return EulerAngles(math.degrees(roll), pitch_deg, 0.0)
    roll = math.atan2(r[2, 1], r[2, 2])
    yaw = math.atan2(r[1, 0], r[0, 0])
    return EulerAngles(math.degrees(roll), pitch_deg, math.degrees(yaw))


def _frames_compatible(a: Optional[str], b: Optional[str]) -> bool:
    return a is None or b is None or a == b


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from ``source`` frame coordinates into ``target`` frame.

    A frame tag of ``None`` is a wildcard that matches any frame.
    """

    rotation: Quaternion
    translation: tuple[float, float, float]
    source: Optional[str] = None
    target: Optional[str] = None

    def __post_init__(self):
        _check_unit(self.rotation)
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3:
            raise GeometryError("translation must have 3 components")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, source: Optional[str] = None, target: Optional[str] = None) -> "RigidTransform":
        return cls(Quaternion.identity(), (0.0, 0.0, 0.0), source, target)

    @classmethod
    def from_matrix(cls, m: np.ndarray, source=None, target=None) -> "RigidTransform":
        return cls(matrix_to_quat(np.asarray(m)[:3, :3]), tuple(np.asarray(m)[:3, 3]), source, target)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation, dtype=np.float64)

    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.to_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def with_frames(self, source: Optional[str], target: Optional[str]) -> "RigidTransform":
        return RigidTransform(self.rotation, self.translation, source, target)

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation_matrix().T + self.t

    def to_text(self) -> str:
        vals = self.rotation.as_array().tolist() + list(self.translation)
        return " ".join(f"{v:.17g}" for v in vals)

    @classmethod
    def from_text(cls, line: str, source=None, target=None) -> "RigidTransform":
        parts = line.split()
        if len(parts) != 7:
            raise GeometryError(f"expected 7 values 'qw qx qy qz tx ty tz', got {len(parts)}")
        vals = [float(p) for p in parts]
        return cls(Quaternion(*vals[:4]), tuple(vals[4:]), source, target)


def matrix_to_quat(r: np.ndarray) -> Quaternion:
    """Unit quaternion (w >= 0) for a 3x3 rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = (0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s)
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = ((r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s)
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = ((r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = ((r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s)
    out = quat_normalize(Quaternion(*q))
    return -out if out.w < 0 else out


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    """``compose(t1, t2)(x) == t1(t2(x))``."""
    if not _frames_compatible(t1.source, t2.target):
        raise GeometryError(f"frame mismatch: cannot compose {t1.source!r} with {t2.target!r}")
    q = quat_normalize(t1.rotation * t2.rotation)
    t = t1.rotation_matrix() @ t2.t + t1.t
    return RigidTransform(q, tuple(t), t2.source, t1.target)


def inverse(t: RigidTransform) -> RigidTransform:
    q = t.rotation.conjugate()
    ti = -(q.to_matrix() @ t.t)
    return RigidTransform(q, tuple(ti), t.target, t.source)


def relative_rotation(q_pred: Quaternion, q_true: Quaternion) -> Quaternion:
    """``q_pred^-1 * q_true``."""
    return quat_normalize(q_pred.conjugate() * q_true)


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N x 3 metric points expressed in ``frame``."""

    points: np.ndarray
    frame: Optional[str] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


def apply(t: RigidTransform, pc: PointCloud) -> PointCloud:
    if not _frames_compatible(t.source, pc.frame):
        raise GeometryError(f"frame mismatch: transform expects {t.source!r}, cloud is in {pc.frame!r}")
    frame = t.target if t.target is not None else pc.frame
    return PointCloud(t.transform_points(pc.points), frame)
