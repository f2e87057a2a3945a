"""Stage-wise refinement, calibration error metrics and stage reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from trical.geometry import (
    GeometryError,
    Quaternion,
    RigidTransform,
    angular_distance_rad,
    compose,
    inverse,
    quat_to_euler,
    relative_rotation,
)
from trical.losses import PAIRS
from trical.perturb import StageSchedule, sample_dual, miscalibrate


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class CalibrationEstimate:
    pair: str
    stage: int
    correction: RigidTransform  # accumulated correction, applied on the camera side
    initial: RigidTransform  # miscalibrated LiDAR -> camera extrinsic

    @classmethod
    def start(cls, pair: str, initial: RigidTransform) -> "CalibrationEstimate":
        frame = initial.target
        return cls(pair, 0, RigidTransform.identity(frame, frame), initial)

    @property
    def extrinsic(self) -> RigidTransform:
        return compose(self.correction, self.initial)


def refine_step(prev: CalibrationEstimate, delta: RigidTransform, n_stages: Optional[int] = None) -> CalibrationEstimate:
    if n_stages is not None and prev.stage >= n_stages:
        raise EvalError(f"estimate is already at the last stage ({prev.stage})")
    if delta.source is None and delta.target is None:
        frame = prev.correction.target
        delta = delta.with_frames(frame, frame)
    return CalibrationEstimate(prev.pair, prev.stage + 1, compose(delta, prev.correction), prev.initial)


def _translations(ts) -> np.ndarray:
    arr = np.array([getattr(t, "t", t) for t in ts], dtype=np.float64).reshape(-1, 3)
    if arr.shape[0] == 0:
        raise EvalError("empty sample set")
    return arr


def metric_et(t_hat, t) -> float:
    """Mean Euclidean translation error in centimeters (inputs in meters)."""
    a, b = _translations(t_hat), _translations(t)
    if a.shape != b.shape:
        raise EvalError("sample counts differ")
    return float(np.linalg.norm(a - b, axis=1).mean() * 100.0)


def _quats(qs) -> list[Quaternion]:
    out = []
    for q in qs:
        if isinstance(q, RigidTransform):
            q = q.rotation
        out.append(q if isinstance(q, Quaternion) else Quaternion.from_array(q))
    if not out:
        raise EvalError("empty sample set")
    return out


def metric_er(q_hat, q) -> float:
    """Mean angular difference in degrees."""
    a, b = _quats(q_hat), _quats(q)
    if len(a) != len(b):
        raise EvalError("sample counts differ")
    try:
        return float(np.degrees(np.mean([angular_distance_rad(x, y) for x, y in zip(a, b)])))
    except GeometryError as e:
        raise EvalError(str(e)) from None


def per_axis_errors(t_hat: Sequence[RigidTransform], t: Sequence[RigidTransform]) -> tuple[float, ...]:
    """(e_X, e_Y, e_Z) in cm and (e_R, e_P, e_Yaw) in degrees.

    Rotation components are the Euler angles of the relative rotation
    q_hat^-1 q, so there is no wraparound between absolute angles.
    """
    if len(t_hat) != len(t):
        raise EvalError("sample counts differ")
    d = np.abs(_translations(t_hat) - _translations(t)).mean(axis=0) * 100.0
    rel = np.array([tuple(quat_to_euler(relative_rotation(a.rotation, b.rotation))[:3]) for a, b in zip(t_hat, t)])
    r = np.abs(rel).mean(axis=0)
    return (float(d[0]), float(d[1]), float(d[2]), float(r[0]), float(r[1]), float(r[2]))


@dataclass(frozen=True)
class StageRow:
    pair: str
    stage: int
    e_x: float
    e_y: float
    e_z: float
    e_t: float
    e_roll: float
    e_pitch: float
    e_yaw: float
    e_r: float
    n_samples: int

    def csv(self) -> str:
        vals = (self.e_x, self.e_y, self.e_z, self.e_t, self.e_roll, self.e_pitch, self.e_yaw, self.e_r)
        return ",".join([self.pair, str(self.stage)] + [repr(float(v)) for v in vals] + [str(self.n_samples)])


REPORT_HEADER = "pair,stage,e_X,e_Y,e_Z,e_t,e_R,e_P,e_Yaw,e_r,n_samples"


def stage_row(pair: str, stage: int, est: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> StageRow:
    ex, ey, ez, er_, ep, eyaw = per_axis_errors(est, gt)
    return StageRow(
        pair, stage, ex, ey, ez, metric_et(est, gt), er_, ep, eyaw, metric_er(est, gt), len(est)
    )


@dataclass(frozen=True)
class StageReport:
    rows: tuple[StageRow, ...]

    def to_csv(self) -> str:
        return REPORT_HEADER + "\n" + "".join(r.csv() + "\n" for r in self.rows)

    def row(self, pair: str, stage: int) -> StageRow:
        for r in self.rows:
            if r.pair == pair and r.stage == stage:
                return r
        raise KeyError((pair, stage))

    def table(self) -> str:
        lines = [f"{'pair':<5}{'stage':>6}{'e_t cm':>10}{'e_r deg':>10}{'N':>6}"]
        for r in self.rows:
            lines.append(f"{r.pair:<5}{r.stage:>6}{r.e_t:>10.2f}{r.e_r:>10.2f}{r.n_samples:>6}")
        return "\n".join(lines)


# A stage model receives the current extrinsics {pair: RigidTransform} for one
# frame and returns the predicted left corrections {pair: RigidTransform}.
StageModel = Callable[[dict], dict]


@dataclass(frozen=True)
class FrameResult:
    """Estimates per pair and stage (index 0 is the uncorrected extrinsic)."""

    estimates: dict  # pair -> list[RigidTransform], length S + 1
    gt: dict  # pair -> RigidTransform


def initial_extrinsics(gt: dict, schedule: StageSchedule, rng: np.random.Generator) -> dict:
    """One dual perturbation from the largest stage range, applied per pair."""
    dt = dict(zip(PAIRS, sample_dual(schedule[0], rng)))
    return {p: miscalibrate(gt[p], dt[p]) for p in PAIRS if p in gt}


def run_pipeline(gt: dict, schedule: StageSchedule, models: Sequence[Optional[StageModel]], rng: np.random.Generator) -> FrameResult:
    """Perturb once, then pass the partially corrected extrinsics through every stage."""
    if len(models) != len(schedule):
        raise EvalError(f"schedule has {len(schedule)} stages but {len(models)} models were given")
    for k, m in enumerate(models, 1):
        if m is None:
            raise EvalError(f"missing model for stage {k}")
    init = initial_extrinsics(gt, schedule, rng)
    est = {p: CalibrationEstimate.start(p, init[p]) for p in init}
    history = {p: [e.extrinsic] for p, e in est.items()}
    for k, model in enumerate(models, 1):
        deltas = model({p: e.extrinsic for p, e in est.items()})
        for p in est:
            est[p] = refine_step(est[p], deltas[p], len(schedule))
            history[p].append(est[p].extrinsic)
    return FrameResult(history, dict(gt))


def build_report(results: Sequence[FrameResult]) -> StageReport:
    if not results:
        raise EvalError("no frames evaluated")
    rows = []
    for pair in PAIRS:
        if pair not in results[0].estimates:
            continue
        n_stages = len(results[0].estimates[pair])
        gt = [r.gt[pair] for r in results]
        for k in range(n_stages):
            rows.append(stage_row(pair, k, [r.estimates[pair][k] for r in results], gt))
    return StageReport(tuple(rows))


def oracle_model(gt: dict) -> StageModel:
    """Stage model that returns the exact remaining correction."""

    def model(current: dict) -> dict:
        return {p: compose(gt[p], inverse(current[p])) for p in current}

    return model
