"""Command-line harness: ``trical {synth,train,eval,gradcheck,oracle}``.

One key=value config file carries the scene, model, training and split
settings; unknown keys are ignored by each consumer. Every command is a pure
function of (config, seed) to output bytes, whatever ``--jobs`` is.

Exit codes: 0 success, 1 unexpected error, 2 usage, 3 bad config or schedule,
4 data or I/O error, 5 training diverged, 6 missing checkpoint, 7 a check
failed.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from trical.dataset import DatasetError, SceneConfig, load_frame, read_key_values, save_frame, synth_scene
from trical.features import FeatureError
from trical.geometry import GeometryError, PointCloud
from trical.losses import LOSS_CSV_HEADER, PAIRS, LossError, LossWeights, loss_csv_row
from trical.perturb import PerturbError, StageSchedule, resolve_schedule
from trical.pipeline import ModelConfig, evaluate, event_input, initial_params, prepare_frame, train_schedule_stage
from trical.projection import ProjectionError, overlay_depth, project_depth, resize_bilinear, write_ppm
from trical.regressor import RegressorError, TrainingConfig, TrainingDiverged, load_stage, save_stage
from trical.rng import SYNTH, substream

log = logging.getLogger("trical")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_DIVERGED = 5
EXIT_CHECKPOINT = 6
EXIT_CHECK_FAILED = 7

MANIFEST = "manifest.txt"
MANIFEST_MAGIC = "trical-dataset 1"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --- configuration -----------------------------------------------------------


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunSettings:
    """Training and split settings read from the config file."""

    batch_size: int = 8
    lr: float = 1e-4
    optimizer: str = "adam"
    epochs: tuple[int, ...] = (4,)  # per stage; the last value covers later stages
    milestones: tuple[int, ...] = ()
    gamma: float = 0.5
    lambda_t: float = 1.0
    lambda_r: float = 1.0
    w: float = 0.5
    train_frames: int = 0  # leading frames used for training; 0 means all
    pairs: tuple[str, ...] = PAIRS
    overlay_frames: int = -1  # evaluated frames that get overlays; -1 means all

    @classmethod
    def from_mapping(cls, kv: dict) -> "RunSettings":
        args: dict = {}
        for key in ("batch_size", "train_frames", "overlay_frames"):
            if key in kv:
                args[key] = int(kv[key])
        for key in ("lr", "gamma", "lambda_t", "lambda_r", "w"):
            if key in kv:
                args[key] = float(kv[key])
        if "optimizer" in kv:
            args["optimizer"] = kv["optimizer"]
        for key in ("epochs", "milestones"):
            if key in kv:
                args[key] = _ints(kv[key])
        if "pairs" in kv:
            pairs = tuple(p for p in kv["pairs"].replace(",", " ").split())
            if not pairs or any(p not in PAIRS for p in pairs):
                raise CliError(f"pairs must be a subset of {list(PAIRS)}, got {kv['pairs']!r}", EXIT_CONFIG)
            args["pairs"] = tuple(p for p in PAIRS if p in pairs)
        out = cls(**args)
        if not out.epochs or min(out.epochs) < 0:
            raise CliError("epochs must list non-negative counts", EXIT_CONFIG)
        return out

    def training(self, stage: int, seed: int) -> TrainingConfig:
        epochs = self.epochs[min(stage, len(self.epochs)) - 1]
        return TrainingConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            milestones=self.milestones,
            gamma=self.gamma,
            epochs=epochs,
            weights=LossWeights(self.lambda_t, self.lambda_r, self.w),
            seed=seed,
            optimizer=self.optimizer,
        )

    def to_text(self) -> str:
        lines = [
            f"batch_size={self.batch_size}",
            f"lr={self.lr!r}",
            f"optimizer={self.optimizer}",
            f"epochs={','.join(map(str, self.epochs))}",
            f"milestones={','.join(map(str, self.milestones))}",
            f"gamma={self.gamma!r}",
            f"lambda_t={self.lambda_t!r}",
            f"lambda_r={self.lambda_r!r}",
            f"w={self.w!r}",
            f"train_frames={self.train_frames}",
            f"pairs={','.join(self.pairs)}",
        ]
        return "".join(line + "\n" for line in lines)


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    out: Path
    jobs: int = 1
    schedule: Optional[StageSchedule] = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    settings: RunSettings = field(default_factory=RunSettings)


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        return read_key_values(path)
    except OSError as e:
        raise CliError(f"cannot read config {path}: {e.strerror}", EXIT_CONFIG) from None
    except DatasetError as e:
        raise CliError(str(e), EXIT_CONFIG) from None


def build_run_config(args: argparse.Namespace) -> RunConfig:
    kv = load_config(args.config)
    try:
        scene = SceneConfig.from_mapping(kv)
        model = ModelConfig.from_mapping(kv)
        settings = RunSettings.from_mapping(kv)
        schedule = resolve_schedule(args.schedule) if getattr(args, "schedule", None) else None
        settings.training(1, args.seed)
    except CliError:
        raise
    except (ValueError, TypeError) as e:
        raise CliError(f"bad config: {e}", EXIT_CONFIG) from None
    return RunConfig(args.command, args.seed, Path(args.out), args.jobs, schedule, scene, model, settings)


# --- dataset directory ------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def frame_dir(root: Path, i: int) -> Path:
    return root / "frames" / f"{i:06d}"


def write_manifest(root: Path, n_frames: int, seed: int) -> Path:
    lines = [MANIFEST_MAGIC, f"seed {seed}", f"frames {n_frames}"]
    for path in sorted(p for p in (root / "frames").rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        lines.append(f"file {rel} {path.stat().st_size} {_sha256(path)}")
    out = root / MANIFEST
    out.write_text("\n".join(lines) + "\n")
    return out


def read_manifest(root: Path) -> tuple[int, list[tuple[str, int, str]]]:
    path = root / MANIFEST
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise CliError(f"{path}: {e.strerror}", EXIT_DATA) from None
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise CliError(f"{path}: not a dataset manifest", EXIT_DATA)
    n_frames, files = None, []
    for n, line in enumerate(lines[1:], 2):
        parts = line.split()
        if parts[:1] == ["frames"] and len(parts) == 2:
            n_frames = int(parts[1])
        elif parts[:1] == ["file"] and len(parts) == 4:
            files.append((parts[1], int(parts[2]), parts[3]))
        elif parts[:1] != ["seed"]:
            raise CliError(f"{path}:{n}: malformed manifest line", EXIT_DATA)
    if n_frames is None:
        raise CliError(f"{path}: missing frame count", EXIT_DATA)
    return n_frames, files


def verify_manifest(root) -> list[str]:
    """Problems found when checking the files listed in the manifest; empty if intact."""
    root = Path(root)
    n_frames, files = read_manifest(root)
    problems = []
    for rel, size, digest in files:
        path = root / rel
        if not path.is_file():
            problems.append(f"{rel}: missing")
        elif path.stat().st_size != size or _sha256(path) != digest:
            problems.append(f"{rel}: checksum mismatch")
    on_disk = sorted(p.name for p in (root / "frames").iterdir() if p.is_dir()) if (root / "frames").is_dir() else []
    if len(on_disk) != n_frames:
        problems.append(f"manifest lists {n_frames} frames but {len(on_disk)} are on disk")
    return problems


def _synth_one(job: tuple) -> int:
    root, i, scene, seed = job
    save_frame(frame_dir(Path(root), i), synth_scene(scene, substream(seed, SYNTH, i)))
    return i


def _pool(jobs: int):
    return ProcessPoolExecutor(jobs) if jobs > 1 else None


def cmd_synth(rc: RunConfig) -> int:
    n = rc.scene.frames
    if n < 1:
        raise CliError("frames must be >= 1", EXIT_CONFIG)
    try:
        rc.out.mkdir(parents=True, exist_ok=True)
        work = [(str(rc.out), i, rc.scene, rc.seed) for i in range(n)]
        pool = _pool(rc.jobs)
        try:
            list(pool.map(_synth_one, work)) if pool else [_synth_one(w) for w in work]
        finally:
            if pool:
                pool.shutdown()
        (rc.out / "scene.cfg").write_text(rc.scene.to_text())
        write_manifest(rc.out, n, rc.seed)
    except OSError as e:
        raise CliError(f"cannot write {e.filename}: {e.strerror}", EXIT_DATA) from None
    print(f"wrote {n} frames to {rc.out}")
    return EXIT_OK


def check_dataset(root: Path) -> int:
    """Verify the manifest checksums and return the frame count."""
    problems = verify_manifest(root)
    if problems:
        raise CliError(f"{root}: dataset check failed: {problems[0]}", EXIT_DATA)
    return read_manifest(root)[0]


def read_frame(root: Path, i: int):
    try:
        return load_frame(frame_dir(root, i))
    except OSError as e:
        raise CliError(f"cannot read {e.filename}: {e.strerror}", EXIT_DATA) from None


def split(n_frames: int, train_frames: int) -> tuple[list[int], list[int]]:
    """Leading frames train, the rest are held out."""
    n_train = n_frames if train_frames <= 0 else min(train_frames, n_frames)
    return list(range(n_train)), list(range(n_train, n_frames))


def _prepare(job: tuple):
    root, i, cfg, pairs = job
    return prepare_frame(read_frame(Path(root), i), cfg, i, pairs)


def prepare_all(root: Path, indices: Sequence[int], cfg: ModelConfig, pairs, jobs: int) -> list:
    """Load and preprocess frames; workers read their frames from disk."""
    work = [(str(root), i, cfg, pairs) for i in indices]
    pool = _pool(jobs)
    try:
        return list(pool.map(_prepare, work)) if pool else [_prepare(w) for w in work]
    finally:
        if pool:
            pool.shutdown()


# --- train -------------------------------------------------------------------


def checkpoint_path(root: Path, stage: int) -> Path:
    return root / f"stage{stage}.ckpt"


def loss_csv_path(root: Path, stage: int) -> Path:
    return root / f"stage{stage}_loss.csv"


def train_config_text(rc: RunConfig) -> str:
    return (
        f"seed={rc.seed}\n"
        + rc.model.to_text()
        + rc.settings.to_text()
        + "".join(f"stage{k}={r.max_rot!r} {r.max_trans!r}\n" for k, r in enumerate(rc.schedule.ranges, 1))
    )


def cmd_train(rc: RunConfig, data: Path, resume: bool) -> int:
    train, _ = split(check_dataset(data), rc.settings.train_frames)
    pairs = rc.settings.pairs
    rc.out.mkdir(parents=True, exist_ok=True)
    cfg_path = rc.out / "train.cfg"
    text = train_config_text(rc)
    if resume and cfg_path.exists() and cfg_path.read_text() != text:
        raise CliError(f"{cfg_path}: existing run used a different config; refusing to resume", EXIT_CONFIG)
    cfg_path.write_text(text)
    log.info("preparing %d training frames", len(train))
    inputs = prepare_all(data, train, rc.model, pairs, rc.jobs)
    params = initial_params(rc.model, rc.seed, pairs)
    for stage in range(1, len(rc.schedule) + 1):
        ckpt, csv = checkpoint_path(rc.out, stage), loss_csv_path(rc.out, stage)
        if resume and ckpt.exists() and csv.exists():
            params, _ = load_stage(ckpt)
            print(f"stage {stage}: resumed from {ckpt}")
            continue
        tcfg = rc.settings.training(stage, rc.seed)
        try:
            res = train_schedule_stage(inputs, rc.schedule, stage, rc.model, tcfg, params, rc.jobs)
        except TrainingDiverged as e:
            raise CliError(str(e), EXIT_DIVERGED) from None
        params = res.params
        save_stage(ckpt, params, rc.model.regressor())
        rows = [loss_csv_row(e, c.get("rgb"), c.get("ev")) for e, c in enumerate(res.curve)]
        csv.write_text(LOSS_CSV_HEADER + "\n" + "".join(r + "\n" for r in rows))
        for w in res.warnings:
            log.warning("stage %d: %s", stage, w)
        last = rows[-1].rsplit(",", 1)[1] if rows else "nan"
        print(f"stage {stage}: {tcfg.epochs} epochs, final l_total {last}, wrote {ckpt}")
    return EXIT_OK


# --- eval --------------------------------------------------------------------


def _gray_background(frame, pair: str, cfg: ModelConfig) -> np.ndarray:
    if pair == "rgb":
        img = resize_bilinear(frame.image, cfg.input_w, cfg.input_h)
        return np.clip(img @ np.array([0.299, 0.587, 0.114]), 0.0, 1.0)
    acc = event_input(frame, cfg)
    net = acc[:, :, 0] - acc[:, :, 1]
    scale = max(1.0, float(np.max(np.abs(net))))
    return np.clip(0.5 + 0.5 * net / scale, 0.0, 1.0)


def render_overlay(frame, fi, pair: str, extrinsic, cfg: ModelConfig) -> np.ndarray:
    """LiDAR depth seen through ``extrinsic`` over the pair's camera frame, at model input size."""
    pts = extrinsic.transform_points(frame.cloud.points)
    keep = (pts[:, 2] > 0) & (pts[:, 2] <= cfg.z_max)
    depth = project_depth(PointCloud(pts[keep]), fi.k_input[pair], cfg.input_w, cfg.input_h)
    return overlay_depth(_gray_background(frame, pair, cfg), depth, cfg.z_max)


def cmd_eval(rc: RunConfig, data: Path, checkpoints: Path) -> int:
    stages = []
    for stage in range(1, len(rc.schedule) + 1):
        path = checkpoint_path(checkpoints, stage)
        if not path.exists():
            raise CliError(f"missing checkpoint for stage {stage}: {path}", EXIT_CHECKPOINT)
        try:
            params, rcfg = load_stage(path)
        except RegressorError as e:
            raise CliError(f"stage {stage}: {e}", EXIT_CHECKPOINT) from None
        if rcfg != rc.model.regressor():
            raise CliError(f"stage {stage}: checkpoint does not match the model config", EXIT_CONFIG)
        missing = [p for p in rc.settings.pairs if p not in params]
        if missing:
            raise CliError(f"stage {stage}: checkpoint has no weights for {missing}", EXIT_CHECKPOINT)
        stages.append(params)
    n_frames = check_dataset(data)
    _, held_out = split(n_frames, rc.settings.train_frames)
    if not held_out:
        log.warning("no held-out frames; evaluating on all %d frames", n_frames)
        held_out = list(range(n_frames))
    inputs = prepare_all(data, held_out, rc.model, rc.settings.pairs, rc.jobs)
    results, report = evaluate(inputs, rc.schedule, stages, rc.model, rc.seed, rc.jobs)
    rc.out.mkdir(parents=True, exist_ok=True)
    (rc.out / "report.csv").write_text(report.to_csv())
    n_overlay = len(results) if rc.settings.overlay_frames < 0 else min(rc.settings.overlay_frames, len(results))
    over = rc.out / "overlays"
    over.mkdir(exist_ok=True)
    for fi, res in list(zip(inputs, results))[:n_overlay]:
        frame = read_frame(data, fi.index)
        for pair, history in res.estimates.items():
            for tag, ext in (("before", history[0]), ("after", history[-1])):
                write_ppm(over / f"{fi.index:06d}_{pair}_{tag}.ppm", render_overlay(frame, fi, pair, ext, rc.model))
    print(report.table())
    return EXIT_OK


# --- checks ------------------------------------------------------------------


def cmd_gradcheck(seed: int, n_seeds: int) -> int:
    from trical.gradcheck import check_seed

    failed = 0
    for s in range(seed, seed + n_seeds):
        r = check_seed(s)
        ok = r.max_rel_err < 1e-4
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} seed {s}: max relative error {r.max_rel_err:.2e} at {r.worst} ({r.n_params} params)")
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def cmd_oracle(seed: int) -> int:
    from trical.oracles import run_all

    results = run_all(seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


# --- entry point -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trical", description="LiDAR / RGB / event extrinsic calibration")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True, schedule=False):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--seed", type=int, required=True, help="run seed (non-negative)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        if schedule:
            sp.add_argument("--schedule", default="two_stage", help="five_stage, two_stage or a schedule file")

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    sp = sub.add_parser("train", help="train one regressor pair per stage")
    common(sp, schedule=True)
    sp.add_argument("--data", required=True, help="dataset directory written by synth")
    sp.add_argument("--resume", action="store_true", help="keep finished stages found in --out")
    sp = sub.add_parser("eval", help="perturb once and refine through every stage")
    common(sp, schedule=True)
    sp.add_argument("--data", required=True, help="dataset directory written by synth")
    sp.add_argument("--checkpoints", required=True, help="directory written by train")
    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")
    sp = sub.add_parser("oracle", help="run every brute-force oracle")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _setup_logging() -> None:
    level = os.environ.get("TRICAL_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.seeds)
        if args.command == "oracle":
            return cmd_oracle(args.seed)
        rc = build_run_config(args)
        if args.command == "synth":
            return cmd_synth(rc)
        if args.command == "train":
            return cmd_train(rc, Path(args.data), args.resume)
        return cmd_eval(rc, Path(args.data), Path(args.checkpoints))
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except PerturbError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ProjectionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (GeometryError, FeatureError, LossError, RegressorError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


def main() -> None:
    _setup_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
