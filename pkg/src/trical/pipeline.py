"""Frame preprocessing and sample construction shared by training and evaluation.

Per frame, camera embeddings are computed once. The LiDAR branch range-clips
and resamples the cloud in the LiDAR frame and computes per-point features
once, independent of which camera pairs are enabled. Each pair then moves those
points into its current camera frame, keeps the ones in front of the camera and
projects depth and features with its own scaled intrinsics before correlating
the fused LiDAR embedding with its camera embedding.
"""

from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from trical.costvolume import correlate, leaky_relu
from trical.dataset import (
    EVENT_WINDOW_US,
    KITTI_MEAN,
    KITTI_STD,
    SyntheticFrame,
    accumulate_events,
    resample_points,
    standardize_image,
)
from trical.features import camera_embedding, extract_image_features, extract_point_features, fuse_lidar
from trical.eval import FrameResult, build_report, run_pipeline
from trical.geometry import PointCloud, Quaternion, RigidTransform, compose, inverse
from trical.losses import PAIRS
from trical.perturb import PerturbRange, StageSchedule, miscalibrate, sample_dual
from trical.projection import project_depth, project_features, resize_bilinear, scale_intrinsics
from trical.regressor import (
    Batch,
    RegressorConfig,
    StageResult,
    TrainingConfig,
    forward,
    init_params,
    normalize_rotation,
    train_stage,
)
from trical.rng import EVAL, INIT, PAIR_IDS, PERTURB, RESAMPLE, SHUFFLE, substream


@dataclass(frozen=True)
class ModelConfig:
    input_w: int = 512
    input_h: int = 256
    feat_w: int = 32
    feat_h: int = 16
    radius: int = 4
    channels: int = 8
    n_points: int = 5000
    z_max: float = 80.0
    density_radius: float = 1.0
    event_window_us: int = EVENT_WINDOW_US
    growth: int = 8
    kernel: int = 3
    fc_width: int = 128
    head_width: int = 64

    def regressor(self) -> RegressorConfig:
        return RegressorConfig(
            in_channels=(2 * self.radius + 1) ** 2,
            height=self.feat_h,
            width=self.feat_w,
            growth=self.growth,
            kernel=self.kernel,
            fc_width=self.fc_width,
            head_width=self.head_width,
        )

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        args = {}
        for f in fields(cls):
            if f.name in kv:
                default = getattr(cls, f.name)
                args[f.name] = int(float(kv[f.name])) if isinstance(default, int) else float(kv[f.name])
        return cls(**args)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass(frozen=True, eq=False)
class FrameInputs:
    """Everything about a frame that does not depend on the miscalibration."""

    cloud: PointCloud  # LiDAR frame
    gt: dict  # pair -> RigidTransform (LiDAR -> camera)
    k_input: dict  # pair -> scaled intrinsics at model input resolution
    k_feat: dict  # pair -> scaled intrinsics at feature resolution
    cam_fm: dict  # pair -> (C, feat_h, feat_w) camera embedding
    index: int = 0


def rgb_input(image: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    img = resize_bilinear(image, cfg.input_w, cfg.input_h)
    return standardize_image(img, KITTI_MEAN, KITTI_STD)


def event_input(frame: SyntheticFrame, cfg: ModelConfig) -> np.ndarray:
    k = frame.k_ev
    acc = accumulate_events(frame.events, frame.t_center, cfg.event_window_us, k.width, k.height)
    return resize_bilinear(acc, cfg.input_w, cfg.input_h)


def prepare_frame(frame: SyntheticFrame, cfg: ModelConfig, index: int = 0, pairs: Sequence[str] = PAIRS) -> FrameInputs:
    intr = {"rgb": frame.k_rgb, "ev": frame.k_ev}
    gt = {"rgb": frame.t_li_rgb, "ev": frame.t_li_ev}
    cam = {}
    if "rgb" in pairs:
        cam["rgb"] = camera_embedding(extract_image_features(rgb_input(frame.image, cfg), cfg.feat_h, cfg.feat_w), cfg.channels)
    if "ev" in pairs:
        cam["ev"] = camera_embedding(extract_image_features(event_input(frame, cfg), cfg.feat_h, cfg.feat_w), cfg.channels)
    return FrameInputs(
        cloud=frame.cloud,
        gt={p: gt[p] for p in pairs},
        k_input={p: scale_intrinsics(intr[p], cfg.input_w, cfg.input_h) for p in pairs},
        k_feat={p: scale_intrinsics(intr[p], cfg.feat_w, cfg.feat_h) for p in pairs},
        cam_fm=cam,
        index=index,
    )


@dataclass(frozen=True, eq=False)
class SharedLidar:
    """Output of the shared LiDAR branch for one miscalibration."""

    points: np.ndarray  # (N, 3) LiDAR frame
    features: np.ndarray  # (N, 5) per-point features


@dataclass(frozen=True, eq=False)
class PairSample:
    cv: np.ndarray  # (M, H, W) after LeakyReLU
    lidar_fm: np.ndarray  # (C, H, W) unified LiDAR embedding
    points: np.ndarray  # (N, 3) cloud in this pair's current camera frame


def shared_lidar(fi: FrameInputs, cfg: ModelConfig, rng: np.random.Generator) -> SharedLidar:
    pts = fi.cloud.points
    r = np.linalg.norm(pts, axis=1)
    cloud = PointCloud(pts[(r > 0) & (r <= cfg.z_max)], fi.cloud.frame)
    res = resample_points(cloud, cfg.n_points, rng)
    return SharedLidar(res.points, extract_point_features(res, cfg.density_radius))


def lidar_embedding(points: np.ndarray, feats: np.ndarray, k_input, k_feat, cfg: ModelConfig) -> np.ndarray:
    z = points[:, 2]
    keep = (z > 0) & (z <= cfg.z_max)
    pc = PointCloud(points[keep])
    depth = project_depth(pc, k_input, cfg.input_w, cfg.input_h)
    depth_fm = extract_image_features(depth, cfg.feat_h, cfg.feat_w)
    point_fm = project_features(pc, feats[keep], k_feat, cfg.feat_w, cfg.feat_h)
    return fuse_lidar(point_fm, depth_fm, cfg.channels)


def build_samples(fi: FrameInputs, current: dict, cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """Cost volume and supervision cloud for each pair in ``current``.

    ``current`` maps pair id to the current (miscalibrated or partially
    corrected) LiDAR -> camera extrinsic.
    """
    shared = shared_lidar(fi, cfg, rng)
    out = {}
    for pair in PAIRS:
        if pair not in current:
            continue
        pts = current[pair].transform_points(shared.points)
        lidar = lidar_embedding(pts, shared.features, fi.k_input[pair], fi.k_feat[pair], cfg)
        cv = leaky_relu(correlate(lidar, fi.cam_fm[pair], cfg.radius))
        out[pair] = PairSample(cv, lidar, pts)
    return out


def correction_target(gt: RigidTransform, current: RigidTransform) -> RigidTransform:
    """The left correction that maps ``current`` onto ``gt``."""
    return compose(gt, inverse(current))


# --- training and evaluation drivers -----------------------------------------

# Large read-only state (prepared frames, stage parameters) reaches worker
# processes once, through the pool initializer of a fork-based pool.
_WORKER: dict = {}


def _init_worker(state: dict) -> None:
    _WORKER.clear()
    _WORKER.update(state)


def make_executor(jobs: int, state: dict):
    """Process pool for ``jobs`` > 1 (None otherwise); ``state`` is installed in
    this process too, so serial and parallel runs read the same data."""
    _init_worker(state)
    if jobs <= 1:
        return None
    return ProcessPoolExecutor(jobs, mp_context=multiprocessing.get_context("fork"), initializer=_init_worker, initargs=(state,))


def map_ordered(fn, items, executor=None) -> list:
    """``list(map(fn, items))``, on the pool if one is given; order is preserved."""
    items = list(items)
    if executor is None or len(items) < 2:
        return [fn(x) for x in items]
    workers = executor._max_workers
    return list(executor.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def frame_training_sample(fi: FrameInputs, cfg: ModelConfig, r: PerturbRange, seed: int, stage: int, epoch: int) -> dict:
    """{pair: (cost volume, target t, target q, cloud)} for one frame and epoch."""
    key = (stage, epoch, fi.index)
    dts = dict(zip(PAIRS, sample_dual(r, substream(seed, PERTURB, *key))))
    current = {p: miscalibrate(fi.gt[p], dts[p]) for p in fi.gt}
    samples = build_samples(fi, current, cfg, substream(seed, RESAMPLE, *key))
    out = {}
    for p, smp in samples.items():
        target = correction_target(fi.gt[p], current[p])
        out[p] = (smp.cv, np.array(target.t), target.rotation.as_array(), smp.points)
    return out


@dataclass(frozen=True)
class SampleJob:
    position: int  # index into the worker's frame list
    r: PerturbRange
    seed: int
    stage: int
    epoch: int


def _sample_job(job: SampleJob) -> dict:
    return frame_training_sample(_WORKER["frames"][job.position], _WORKER["cfg"], job.r, job.seed, job.stage, job.epoch)


def make_batches(samples: Sequence[dict], batch_size: int, rng: np.random.Generator) -> list[dict]:
    order = rng.permutation(len(samples))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batch = {}
        for p in samples[0]:
            cv, t, q, pts = zip(*(samples[i][p] for i in idx))
            batch[p] = Batch(np.stack(cv), np.stack(t), np.stack(q), np.stack(pts))
        batches.append(batch)
    return batches


def initial_params(cfg: ModelConfig, seed: int, pairs: Sequence[str] = PAIRS) -> dict:
    rcfg = cfg.regressor()
    return {p: init_params(rcfg, substream(seed, INIT, PAIR_IDS[p])) for p in pairs}


def train_schedule_stage(
    frames: Sequence[FrameInputs],
    schedule: StageSchedule,
    stage: int,
    cfg: ModelConfig,
    tcfg: TrainingConfig,
    params_init: dict,
    jobs: int = 1,
) -> StageResult:
    """Train stage ``stage`` (1-based) on fresh perturbations from its range every epoch."""
    if not 1 <= stage <= len(schedule):
        raise ValueError(f"stage {stage} outside 1..{len(schedule)}")
    r = schedule[stage - 1]
    executor = make_executor(jobs, {"frames": list(frames), "cfg": cfg})
    try:

        def epoch_batches(epoch: int):
            work = [SampleJob(i, r, tcfg.seed, stage, epoch) for i in range(len(frames))]
            samples = map_ordered(_sample_job, work, executor)
            return make_batches(samples, tcfg.batch_size, substream(tcfg.seed, SHUFFLE, stage, epoch))

        return train_stage(epoch_batches, tcfg, cfg.regressor(), params_init, stage)
    finally:
        if executor is not None:
            executor.shutdown()


def predict_corrections(fi: FrameInputs, current: dict, stage_params: dict, cfg: ModelConfig, rng) -> dict:
    """Left corrections predicted by one stage's regressors."""
    rcfg = cfg.regressor()
    samples = build_samples(fi, current, cfg, rng)
    out = {}
    for p, smp in samples.items():
        t, q_raw = forward(smp.cv, stage_params[p], rcfg)
        q = normalize_rotation(q_raw)[0]
        frame = current[p].target
        out[p] = RigidTransform(Quaternion.from_array(q), tuple(t[0]), frame, frame)
    return out


def evaluate_frame(fi: FrameInputs, schedule: StageSchedule, stages: Sequence, cfg: ModelConfig, seed: int) -> FrameResult:
    """One perturbation from the largest range, then every stage in turn."""
    models = []
    for k, prm in enumerate(stages, 1):
        if prm is None:
            models.append(None)
            continue
        rng = substream(seed, EVAL, RESAMPLE, fi.index, k)
        models.append(lambda cur, prm=prm, rng=rng: predict_corrections(fi, cur, prm, cfg, rng))
    return run_pipeline(fi.gt, schedule, models, substream(seed, EVAL, PERTURB, fi.index))


def _eval_job(position: int) -> FrameResult:
    w = _WORKER
    return evaluate_frame(w["frames"][position], w["schedule"], w["stages"], w["cfg"], w["seed"])


def evaluate(frames, schedule: StageSchedule, stages: Sequence, cfg: ModelConfig, seed: int, jobs: int = 1):
    state = {"frames": list(frames), "schedule": schedule, "stages": list(stages), "cfg": cfg, "seed": seed}
    executor = make_executor(jobs, state)
    try:
        results = map_ordered(_eval_job, range(len(frames)), executor)
    finally:
        if executor is not None:
            executor.shutdown()
    return results, build_report(results)
