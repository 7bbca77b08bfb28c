import json
from pathlib import Path
from time import perf_counter

import numpy as np
import pytest

from ebtrack.commands.ablate import run_grid, suite_inputs
from ebtrack.lib.config import RunConfig, apply_overrides
from ebtrack.lib.evalharness import (
    PRECISION_THRESHOLDS,
    SUCCESS_THRESHOLDS,
    BatchJob,
    SynthSpec,
    Teleport,
    aggregate,
    build_suite,
    center_error,
    compute_curves,
    load_synth_spec,
    load_trajectory,
    proposal_bound,
    reacquisition,
    read_event_frames,
    resample_lowfps,
    run_batch,
    run_ope,
    synth_sequence,
    write_curves_csv,
    write_sequence,
    write_summary_json,
    write_trajectory,
)
from ebtrack.lib.imgio import BoundingBox, iou, load_ground_truth, load_sequence
from ebtrack.lib.pipeline import FrameRecord
from ebtrack.utils import ConfigError, DataError

SPECS = Path(__file__).resolve().parent.parent / "specs"

GT = [BoundingBox(x=0, y=0, w=10, h=10)] * 5
SHRINKING = [BoundingBox(x=0, y=0, w=10, h=h) for h in (10, 8, 6, 4, 2)]


def oracle(traj, gt):
    pairs = [(t, g) for t, g in zip(traj, gt) if g is not None]
    n = len(pairs)
    success, precision = [], []
    for threshold in SUCCESS_THRESHOLDS:
        count = 0
        for t, g in pairs:
            if iou(t, g) >= threshold:
                count += 1
        success.append(count / n)
    for threshold in PRECISION_THRESHOLDS:
        count = 0
        for t, g in pairs:
            if center_error(t, g) <= threshold:
                count += 1
        precision.append(count / n)
    return success, precision, sum(success) / len(success)


def test_hand_computed_curves():
    curves = compute_curves(SHRINKING, GT)
    assert curves.success == [1.0] * 5 + [0.8] * 4 + [0.6] * 4 + [0.4] * 4 + [0.2] * 4
    assert curves.auc == pytest.approx(13 / 21, abs=1e-15)
    assert curves.success[10] == 0.6
    assert curves.precision[:5] == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert curves.ps20 == 1.0
    assert curves.frames == 5


def test_curves_match_the_double_loop():
    rng = np.random.default_rng(31)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        gt = [BoundingBox(x=float(x), y=float(y), w=float(w), h=float(h)) for x, y, w, h in zip(rng.uniform(0, 100, n), rng.uniform(0, 100, n), rng.uniform(5, 40, n), rng.uniform(5, 40, n))]
        traj = [BoundingBox(x=g.x + float(dx), y=g.y + float(dy), w=g.w, h=g.h) for g, dx, dy in zip(gt, rng.normal(0, 15, n), rng.normal(0, 15, n))]
        curves = compute_curves(traj, gt)
        success, precision, auc = oracle(traj, gt)
        assert curves.success == success
        assert curves.precision == precision
        assert curves.auc == auc
        assert all(b <= a for a, b in zip(curves.success, curves.success[1:]))
        assert all(b >= a for a, b in zip(curves.precision, curves.precision[1:]))


def test_perfect_trajectory():
    curves = compute_curves(GT, GT)
    assert curves.ps20 == 1.0 and curves.auc == 1.0


def test_absent_ground_truth_is_skipped():
    curves = compute_curves(SHRINKING, GT[:4] + [None])
    assert curves.frames == 4
    with pytest.raises(DataError):
        compute_curves(SHRINKING, GT[:4])


def test_proposal_bound():
    candidates = [[BoundingBox(x=30, y=30, w=5, h=5), g] for g in GT]
    assert proposal_bound(candidates, GT).auc == 1.0
    bound = proposal_bound([[]] * 5, GT)
    assert bound.success[0] == 1.0 and not any(bound.success[1:])
    assert bound.ps20 == 0.0 and not any(bound.precision)


def test_reacquisition_window_is_inclusive():
    far = BoundingBox(x=50, y=50, w=10, h=10)
    traj = [GT[0], far, far, far, GT[0]]
    assert reacquisition(traj, GT, [1], window=3) == [True]
    assert reacquisition(traj, GT, [1], window=2) == [False]
    assert reacquisition(traj, GT, [0, 4], window=0) == [True, True]


def test_low_frame_rate_resampling(tiny_sequence):
    frames, gt = resample_lowfps(tiny_sequence.frames, tiny_sequence.gt, 3)
    assert len(frames) == len(gt) == 3
    assert gt[1] == tiny_sequence.gt[3]
    with pytest.raises(ConfigError):
        resample_lowfps(tiny_sequence.frames, tiny_sequence.gt, 0)


def test_synthetic_sequences_are_reproducible(tiny_sequence):
    again = synth_sequence(tiny_sequence.spec)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(again.frames, tiny_sequence.frames))
    assert again.gt == tiny_sequence.gt
    assert len(tiny_sequence.frames) == 8
    for g in tiny_sequence.gt:
        assert (g.w, g.h) == (24, 24)
        assert 0 <= g.x <= 72 and 0 <= g.y <= 48
    first, box = tiny_sequence.frames[0], tiny_sequence.gt[0]
    x, y = int(box.x), int(box.y)
    assert np.all(first.pixels[y, x : x + 24] == 0)


def test_teleports(teleport_sequence):
    gt = teleport_sequence.gt
    assert teleport_sequence.teleport_frames == [5]
    assert gt[5].x - gt[4].x == 100
    assert gt[4] == gt[0]


def test_teleports_leaving_the_frame_are_mirrored():
    spec = SynthSpec(width=320, height=240, frames=4, start=(250, 100), motion="static", teleports=[Teleport(frame=2, dx=150)])
    seq = synth_sequence(spec)
    assert seq.gt[2].x == 100.0


def test_invalid_specs(tmp_path):
    with pytest.raises(ValueError):
        SynthSpec(width=32, height=32, object_w=40)
    path = tmp_path / "big.json"
    path.write_text(json.dumps({"width": 32, "height": 32, "object_w": 40}))
    with pytest.raises(ConfigError, match="object"):
        load_synth_spec(path)
    path.write_text(json.dumps({"frame": 3}))
    with pytest.raises(ConfigError, match="frame"):
        load_synth_spec(path)
    with pytest.raises(ConfigError):
        synth_sequence(SynthSpec(frames=5, motion="linear", velocity=(100, 0)))


def test_stock_specs_regenerate_identically():
    spec = load_synth_spec(SPECS / "teleport-x150.json")
    a, b = synth_sequence(spec), synth_sequence(spec)
    assert a.teleport_frames == [50]
    assert abs(a.gt[50].x - a.gt[49].x) >= 120
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.frames, b.frames))
    smooth = synth_sequence(load_synth_spec(SPECS / "smooth-motion.json"))
    assert smooth.teleport_frames == []


def test_written_sequences_load_back(tmp_path, tiny_sequence):
    directory = write_sequence(tiny_sequence, tmp_path / "tiny")
    frames = load_sequence(directory)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(frames, tiny_sequence.frames))
    assert load_ground_truth(directory / "groundtruth_rect.txt") == tiny_sequence.gt
    assert read_event_frames(directory) == []
    assert read_event_frames(tmp_path) == []


def test_suite_is_seeded():
    a, b = build_suite(4, frames=30, seed=3), build_suite(4, frames=30, seed=3)
    assert a == b
    for spec in a:
        assert len(spec.teleports) == 1
        assert 10 <= spec.teleports[0].frame < 20
        assert abs(spec.teleports[0].dx) == 150
    assert all(not s.teleports for s in build_suite(2, teleport=False))


def test_trajectory_files(tmp_path):
    records = [FrameRecord(index=i, estimate=b, score=0.5 * i) for i, b in enumerate(SHRINKING)]
    write_trajectory(records, tmp_path / "trajectory.csv")
    assert load_trajectory(tmp_path / "trajectory.csv") == SHRINKING
    lines = (tmp_path / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "frame,x,y,w,h,score"
    assert lines[2] == "1,0.000000,0.000000,10.000000,8.000000,0.500000000"
    otb = tmp_path / "otb.txt"
    otb.write_text("1,1,10,10\n")
    assert load_trajectory(otb) == [GT[0]]
    with pytest.raises(DataError):
        load_trajectory(tmp_path / "missing.csv")


def test_summaries(tmp_path):
    curves = compute_curves(SHRINKING, GT)
    write_curves_csv(curves, tmp_path / "curves.csv")
    rows = (tmp_path / "curves.csv").read_text().splitlines()
    assert len(rows) == 1 + 21 + 51
    assert rows[11] == "success,0.50,0.600000"
    mean = aggregate([{"auc": 0.2, "ps20": 0.4, "fps": None}, {"auc": 0.6, "ps20": 0.8, "fps": 10.0}])
    assert mean["auc"] == pytest.approx(0.4) and mean["ps20"] == pytest.approx(0.6) and mean["fps"] == 10.0
    write_summary_json(mean, tmp_path / "aggregate.json")
    assert json.loads((tmp_path / "aggregate.json").read_text())["sequences"] == 2
    with pytest.raises(DataError):
        aggregate([])


def test_one_pass_evaluation(tiny_sequence, small_cfg):
    result = run_ope(tiny_sequence.frames, tiny_sequence.gt, small_cfg, name="tiny")
    assert len(result.trajectory) == len(tiny_sequence.frames)
    assert result.trajectory[0] == tiny_sequence.gt[0]
    assert 0.0 <= result.curves.auc <= 1.0
    with pytest.raises(DataError):
        run_ope(tiny_sequence.frames, tiny_sequence.gt[:3], small_cfg)
    with pytest.raises(DataError):
        run_ope(tiny_sequence.frames, [None] * len(tiny_sequence.frames), small_cfg)


@pytest.mark.asyncio
async def test_batch_keeps_job_order(tiny_sequence, teleport_sequence, small_cfg):
    jobs = [
        BatchJob(name="jump", frames=teleport_sequence.frames[:4], gt=teleport_sequence.gt[:4], cfg=small_cfg),
        BatchJob(name="tiny", frames=tiny_sequence.frames[:4], gt=tiny_sequence.gt[:4], cfg=small_cfg),
    ]
    results = await run_batch(jobs)
    assert [r.name for r in results] == ["jump", "tiny"]
    alone = run_ope(tiny_sequence.frames[:4], tiny_sequence.gt[:4], small_cfg)
    assert results[1].trajectory == alone.trajectory


def _reacquired(specs, cfg, window=5):
    events = []
    for spec in specs:
        seq = synth_sequence(spec)
        result = run_ope(seq.frames, seq.gt, cfg, name=spec.name)
        events.extend(reacquisition(result.trajectory, seq.gt, seq.teleport_frames, window=window))
    return sum(events) / len(events)


@pytest.mark.slow
def test_proposals_reacquire_after_teleports_and_local_search_does_not():
    specs = build_suite(20, frames=100, teleport=True, seed=1)
    start = perf_counter()
    proposals = _reacquired(specs, RunConfig())
    elapsed = perf_counter() - start
    local = _reacquired(specs, apply_overrides(RunConfig(), {"test_set": "R", "local_radius": 30.0}))
    assert proposals >= 0.8
    assert local <= 0.2
    assert elapsed <= 600.0


@pytest.mark.slow
def test_proposal_candidates_track_at_least_as_well_as_local_search():
    inputs = suite_inputs(8, frames=60, teleport=False, seed=2, max_step=15)
    proposals = run_grid(RunConfig(), inputs, ("E",), ("E+R",), window=5)["E/E+R"]
    local = run_grid(RunConfig(), inputs, ("R",), ("R",), window=5)["R/R"]
    assert proposals["events"] == local["events"] == 0
    assert proposals["auc"] >= local["auc"]
