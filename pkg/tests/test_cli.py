import json

import pytest
from click.testing import CliRunner

from ebtrack.lib.evalharness import write_sequence
from ebtrack.lib.imgio import save_image
from main import app

from .conftest import SMALL

SMALL_ARGS = [arg for key, value in SMALL.items() for arg in ("--set", f"{key}={value}")]

SPEC = {
    "name": "cli",
    "width": 96,
    "height": 72,
    "frames": 6,
    "object_w": 24,
    "object_h": 24,
    "seed": 9,
    "max_step": 3,
    "distractors": 4,
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def sequence_dir(tmp_path, tiny_sequence):
    return write_sequence(tiny_sequence, tmp_path / "tiny")


def test_help(runner):
    result = runner.invoke(app, ["-h"])
    assert result.exit_code == 0
    for command in ("track", "eval", "propose", "synth", "ablate"):
        assert command in result.output


def test_synth_is_byte_for_byte_repeatable(runner, tmp_path):
    spec = tmp_path / "cli.json"
    spec.write_text(json.dumps(SPEC))
    for out in ("a", "b"):
        result = runner.invoke(app, ["synth", str(spec), "--out", str(tmp_path / out)])
        assert result.exit_code == 0, result.output
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["0001.ppm", "0002.ppm", "0003.ppm", "0004.ppm", "0005.ppm", "0006.ppm", "groundtruth_rect.txt", "sequence.json"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    reseeded = runner.invoke(app, ["synth", str(spec), "--seed", "10", "--out", str(tmp_path / "c")])
    assert reseeded.exit_code == 0
    assert (tmp_path / "c" / "0001.ppm").read_bytes() != (tmp_path / "a" / "0001.ppm").read_bytes()


def test_track_writes_a_reproducible_run(runner, tmp_path, sequence_dir):
    outputs = []
    for out in ("run1", "run2"):
        result = runner.invoke(app, ["track", str(sequence_dir), *SMALL_ARGS, "--out", str(tmp_path / out)])
        assert result.exit_code == 0, result.output
        outputs.append(tmp_path / out)
    first, second = outputs
    for name in ("trajectory.csv", "timing.csv", "manifest.json", "curves.csv", "summary.json"):
        assert (first / name).is_file()
    for name in ("trajectory.csv", "manifest.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    rows = (first / "trajectory.csv").read_text().splitlines()
    assert len(rows) == 1 + 8
    manifest = json.loads((first / "manifest.json").read_text())
    assert manifest["frames"] == 8 and manifest["seed"] == 0
    assert manifest["config"]["patch_size"] == 20


def test_track_options(runner, tmp_path, sequence_dir):
    out = tmp_path / "strided"
    result = runner.invoke(
        app,
        ["track", str(sequence_dir), *SMALL_ARGS, "--stride", "2", "--overlays", "--bound", "--tracker", "ncc_eb", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    assert len((out / "trajectory.csv").read_text().splitlines()) == 1 + 4
    assert len(list((out / "overlays").iterdir())) == 4
    assert "auc" in json.loads((out / "bound.json").read_text())


def test_track_with_an_initial_box_only(runner, tmp_path, sequence_dir):
    (sequence_dir / "groundtruth_rect.txt").unlink()
    out = tmp_path / "nogt"
    result = runner.invoke(app, ["track", str(sequence_dir), *SMALL_ARGS, "--init-box", "10,10,24,24", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert not (out / "summary.json").exists()
    missing = runner.invoke(app, ["track", str(sequence_dir), "--out", str(tmp_path / "x")])
    assert missing.exit_code == 2


def test_exit_codes(runner, tmp_path, sequence_dir):
    assert runner.invoke(app, ["track", str(tmp_path / "nowhere")]).exit_code == 3
    assert runner.invoke(app, ["track", str(sequence_dir), "--set", "patch_size=abc"]).exit_code == 2
    assert runner.invoke(app, ["track", str(sequence_dir), "--set", "no_such_key=1"]).exit_code == 2
    gt = str(sequence_dir / "groundtruth_rect.txt")
    assert runner.invoke(app, ["eval", "--traj", gt, "--gt", gt, "--gt", gt]).exit_code == 2
    assert runner.invoke(app, ["eval", "--traj", gt, "--gt", str(tmp_path / "missing.txt")]).exit_code == 3


def test_eval_scores_ground_truth_as_perfect(runner, tmp_path, sequence_dir):
    gt = str(sequence_dir / "groundtruth_rect.txt")
    out = tmp_path / "eval"
    result = runner.invoke(app, ["eval", "--traj", gt, "--gt", gt, "--out", str(out), "--plot", str(out / "ope.svg")])
    assert result.exit_code == 0, result.output
    mean = json.loads((out / "aggregate.json").read_text())
    assert mean["ps20"] == 1.0 and mean["auc"] == 1.0 and mean["sequences"] == 1
    assert (out / "groundtruth_rect.curves.csv").is_file()
    assert (out / "ope.svg").is_file()


def test_eval_rejects_length_mismatch(runner, tmp_path, sequence_dir):
    gt = sequence_dir / "groundtruth_rect.txt"
    short = tmp_path / "short.txt"
    short.write_text("\n".join(gt.read_text().splitlines()[:3]) + "\n")
    result = runner.invoke(app, ["eval", "--traj", str(short), "--gt", str(gt), "--out", str(tmp_path / "eval")])
    assert result.exit_code == 3


def test_propose_on_a_blank_frame(runner, tmp_path, blank):
    save_image(blank, tmp_path / "blank.ppm")
    out = tmp_path / "proposals"
    result = runner.invoke(app, ["propose", str(tmp_path / "blank.ppm"), "--prev", "20,14,16,16", "--edges", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "proposals.csv").read_text().splitlines() == ["x,y,w,h,objectness"]
    assert (out / "edges.pgm").is_file()


def test_propose_keeps_at_most_h(runner, tmp_path, sequence_dir):
    out = tmp_path / "proposals"
    result = runner.invoke(
        app, ["propose", str(sequence_dir / "0001.ppm"), "--prev", "36,24,24,24", "--proposals", "10", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    rows = (out / "proposals.csv").read_text().splitlines()
    assert len(rows) - 1 <= 10
    assert (out / "overlay.ppm").is_file()


def test_ablate_restricted_cell(runner, tmp_path):
    out = tmp_path / "ablation.json"
    result = runner.invoke(
        app,
        ["ablate", "--suite", "1", "--frames", "4", *SMALL_ARGS, "--test-set", "E", "--update-set", "R", "--out", str(out)],
    )
    assert result.exit_code == 0, result.output
    record = json.loads(out.read_text())
    assert list(record["grid"]) == ["E/R"]
    assert record["sequences"] == ["suite-0-00"]
    assert runner.invoke(app, ["ablate", "--out", str(out)]).exit_code == 2
