from pathlib import Path

import numpy as np
import pytest

from trical.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_OK,
    EXIT_USAGE,
    read_manifest,
    run,
    verify_manifest,
)
from trical.eval import REPORT_HEADER
from trical.losses import LOSS_CSV_HEADER
from trical.projection import read_ppm

TINY = """\
frames=6
point_count=3000
objects=4
n_points=500
radius=2
growth=4
fc_width=16
head_width=8
train_frames=4
epochs=3,1
batch_size=2
"""


def tree_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    cfg = str(d / "tiny.cfg")
    assert run(["synth", "--config", cfg, "--seed", "3", "--out", str(d / "data")]) == EXIT_OK
    assert run(["train", "--config", cfg, "--seed", "3", "--data", str(d / "data"), "--out", str(d / "ck")]) == EXIT_OK
    args = ["eval", "--config", cfg, "--seed", "3", "--data", str(d / "data"), "--checkpoints", str(d / "ck")]
    assert run(args + ["--out", str(d / "ev")]) == EXIT_OK
    return d


def test_synth_is_byte_identical_and_manifest_checks(run_dir, tmp_path):
    cfg = str(run_dir / "tiny.cfg")
    assert run(["synth", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "again"), "--jobs", "2"]) == EXIT_OK
    assert tree_bytes(tmp_path / "again") == tree_bytes(run_dir / "data")
    n, files = read_manifest(run_dir / "data")
    assert n == 6 == len(list((run_dir / "data" / "frames").iterdir()))
    assert len(files) == 6 * 4
    assert verify_manifest(run_dir / "data") == []
    target = tmp_path / "again" / "frames" / "000002" / "points.bin"
    raw = bytearray(target.read_bytes())
    raw[0] ^= 1
    target.write_bytes(bytes(raw))
    assert verify_manifest(tmp_path / "again") == ["frames/000002/points.bin: checksum mismatch"]


def test_train_writes_one_checkpoint_per_stage(run_dir):
    ck = run_dir / "ck"
    assert sorted(p.name for p in ck.glob("*.ckpt")) == ["stage1.ckpt", "stage2.ckpt"]
    lines = (ck / "stage1_loss.csv").read_text().splitlines()
    assert lines[0] == LOSS_CSV_HEADER and len(lines) == 1 + 3
    totals = [float(line.rsplit(",", 1)[1]) for line in lines[1:]]
    assert totals[-1] < totals[0]


def test_resume_reproduces_the_run(run_dir, tmp_path):
    cfg = str(run_dir / "tiny.cfg")
    out = tmp_path / "ck"
    out.mkdir()
    for name in ("stage1.ckpt", "stage1_loss.csv", "train.cfg"):
        (out / name).write_bytes((run_dir / "ck" / name).read_bytes())
    args = ["train", "--config", cfg, "--seed", "3", "--data", str(run_dir / "data"), "--out", str(out), "--resume"]
    assert run(args) == EXIT_OK
    assert tree_bytes(out) == tree_bytes(run_dir / "ck")


def test_eval_outputs(run_dir):
    lines = (run_dir / "ev" / "report.csv").read_text().splitlines()
    assert lines[0] == REPORT_HEADER
    assert len(lines) - 1 == 2 * (2 + 1)
    overlays = sorted((run_dir / "ev" / "overlays").iterdir())
    assert len(overlays) == 2 * 2 * 2  # held-out frames x pairs x before/after
    assert overlays[0].name == "000004_ev_after.ppm"
    assert read_ppm(overlays[0]).shape == (256, 512, 3)


def test_outputs_do_not_depend_on_jobs(run_dir, tmp_path):
    cfg = str(run_dir / "tiny.cfg")
    data = str(run_dir / "data")
    assert run(["train", "--config", cfg, "--seed", "3", "--data", data, "--out", str(tmp_path / "ck"), "--jobs", "3"]) == 0
    assert tree_bytes(tmp_path / "ck") == tree_bytes(run_dir / "ck")
    args = ["eval", "--config", cfg, "--seed", "3", "--data", data, "--checkpoints", str(run_dir / "ck")]
    assert run(args + ["--out", str(tmp_path / "ev"), "--jobs", "3"]) == 0
    assert tree_bytes(tmp_path / "ev") == tree_bytes(run_dir / "ev")


def test_missing_checkpoint_names_the_stage(run_dir, tmp_path, capsys):
    ck = tmp_path / "ck"
    ck.mkdir()
    (ck / "stage1.ckpt").write_bytes((run_dir / "ck" / "stage1.ckpt").read_bytes())
    args = ["eval", "--config", str(run_dir / "tiny.cfg"), "--seed", "3", "--data", str(run_dir / "data")]
    assert run(args + ["--checkpoints", str(ck), "--out", str(tmp_path / "ev")]) == EXIT_CHECKPOINT
    assert "stage 2" in capsys.readouterr().err


def test_identity_schedule_and_single_pair(run_dir, tmp_path):
    (tmp_path / "zero.txt").write_text("0 0\n")
    (tmp_path / "ev.cfg").write_text(TINY.replace("epochs=3,1", "epochs=1") + "pairs=ev\n")
    common = ["--config", str(tmp_path / "ev.cfg"), "--seed", "5", "--schedule", str(tmp_path / "zero.txt")]
    data = str(run_dir / "data")
    assert run(["train", *common, "--data", data, "--out", str(tmp_path / "ck")]) == EXIT_OK
    assert run(["eval", *common, "--data", data, "--checkpoints", str(tmp_path / "ck"), "--out", str(tmp_path / "ev")]) == 0
    rows = [line.split(",") for line in (tmp_path / "ev" / "report.csv").read_text().splitlines()[1:]]
    assert [r[:2] for r in rows] == [["ev", "0"], ["ev", "1"]]
    assert all(float(v) == 0.0 for v in rows[0][2:10])


def test_exit_codes(run_dir, tmp_path):
    cfg = str(run_dir / "tiny.cfg")
    data = str(run_dir / "data")
    assert run(["train", "--seed", "1", "--data", data, "--out", str(tmp_path / "a"), "--schedule", "nope"]) == EXIT_CONFIG
    assert run(["train", "--config", cfg, "--seed", "1", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "b")]) == EXIT_DATA
    assert run(["synth", "--out", str(tmp_path / "c")]) == EXIT_USAGE
    assert run(["bogus"]) == EXIT_USAGE
    (tmp_path / "bad.cfg").write_text("pairs=lidar\n")
    assert run(["synth", "--config", str(tmp_path / "bad.cfg"), "--seed", "1", "--out", str(tmp_path / "d")]) == EXIT_CONFIG


def test_check_commands(capsys):
    assert run(["gradcheck", "--seed", "4", "--seeds", "1"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS seed 4")


def test_overlay_pixels_change_with_calibration(run_dir):
    before = read_ppm(run_dir / "ev" / "overlays" / "000004_rgb_before.ppm")
    after = read_ppm(run_dir / "ev" / "overlays" / "000004_rgb_after.ppm")
    assert before.shape == after.shape and not np.array_equal(before, after)
