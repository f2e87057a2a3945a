"""Artificial miscalibration: staged ranges and independent per-pair sampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from trical.geometry import RigidTransform, compose, euler_to_quat


class PerturbError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbRange:
    max_rot: float  # degrees per axis
    max_trans: float  # centimeters per axis

    def __post_init__(self):
        if self.max_rot < 0 or self.max_trans < 0:
            raise PerturbError("perturbation bounds must be non-negative")


@dataclass(frozen=True)
class StageSchedule:
    ranges: tuple[PerturbRange, ...]

    def __post_init__(self):
        if not self.ranges:
            raise PerturbError("schedule needs at least one stage")
        for a, b in zip(self.ranges, self.ranges[1:]):
            if b.max_rot > a.max_rot or b.max_trans > a.max_trans:
                raise PerturbError("stage ranges must be non-increasing")

    def __len__(self) -> int:
        return len(self.ranges)

    def __getitem__(self, k: int) -> PerturbRange:
        return self.ranges[k]

    def to_text(self) -> str:
        return "".join(f"{r.max_rot:g} {r.max_trans:g}\n" for r in self.ranges)


_BUILTIN = {
    "five_stage": ((20, 150), (10, 100), (5, 50), (2, 20), (1, 10)),
    "two_stage": ((10, 100), (1, 10)),
}


def builtin_schedule(name: str) -> StageSchedule:
    try:
        ranges = _BUILTIN[name]
    except KeyError:
        raise PerturbError(f"unknown schedule {name!r}; expected one of {sorted(_BUILTIN)}") from None
    return StageSchedule(tuple(PerturbRange(float(r), float(t)) for r, t in ranges))


def load_schedule(path) -> StageSchedule:
    ranges = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise PerturbError(f"{path}:{n}: expected 'max_rot_deg max_trans_cm'")
        ranges.append(PerturbRange(float(parts[0]), float(parts[1])))
    return StageSchedule(tuple(ranges))


def resolve_schedule(name_or_path: str) -> StageSchedule:
    if name_or_path in _BUILTIN:
        return builtin_schedule(name_or_path)
    if Path(name_or_path).is_file():
        return load_schedule(name_or_path)
    raise PerturbError(f"unknown schedule {name_or_path!r}")


def sample_perturbation(r: PerturbRange, rng: np.random.Generator) -> RigidTransform:
    """Uniform per-axis Euler angles and translations inside the range box."""
    roll, pitch, yaw = rng.uniform(-r.max_rot, r.max_rot, 3)
    t = rng.uniform(-r.max_trans, r.max_trans, 3) / 100.0
    return RigidTransform(euler_to_quat(roll, pitch, yaw), tuple(t))


def miscalibrate(t_gt: RigidTransform, dt: RigidTransform) -> RigidTransform:
    """Initial (wrong) extrinsic: the disturbance acts on the camera side."""
    if dt.source is None and dt.target is None:
        dt = dt.with_frames(t_gt.target, t_gt.target)
    return compose(dt, t_gt)


def sample_dual(r: PerturbRange, rng: np.random.Generator) -> tuple[RigidTransform, RigidTransform]:
    """Two independent disturbances drawn from separate child streams of ``rng``."""
    g_rgb, g_ev = rng.spawn(2)
    return sample_perturbation(r, g_rgb), sample_perturbation(r, g_ev)


def dual_perturb(t_rgb: RigidTransform, t_ev: RigidTransform, r: PerturbRange, rng: np.random.Generator):
    """Independently miscalibrated LiDAR-RGB and LiDAR-event extrinsics."""
    dt_rgb, dt_ev = sample_dual(r, rng)
    return miscalibrate(t_rgb, dt_rgb), miscalibrate(t_ev, dt_ev)
