import csv
import hashlib
import json
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn

from ..lib.config import RunConfig
from ..lib.evalharness import (
    compute_curves,
    proposal_bound,
    resample_lowfps,
    summary_record,
    write_curves_csv,
    write_summary_json,
    write_trajectory,
)
from ..lib.imgio import BoundingBox, Image, load_ground_truth, load_sequence
from ..lib.pipeline import STAGES, FrameRecord, track_sequence
from ..lib.render import write_overlays
from ..utils import ConfigError, DataError, handle, parse_box, setup_logging
from .options import build_config, config_options

logger = setup_logging(__name__)

GT_NAME = "groundtruth_rect.txt"


def digest_frames(frames: Sequence[Image]) -> str:
    sha = hashlib.sha256()
    for frame in frames:
        sha.update(str(frame.pixels.shape).encode())
        sha.update(frame.pixels.tobytes())
    return sha.hexdigest()


def digest_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_timing(records: Sequence[FrameRecord], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["frame", *STAGES, "pool", "selected", "tested", "fallback"])
        for r in records:
            writer.writerow(
                [r.index]
                + [f"{r.timings.get(stage, 0.0):.6f}" for stage in STAGES]
                + [r.pool_size, r.selected_size, r.test_size, int(r.fallback)]
            )


def resolve_inputs(
    sequence: Path, gt_path: Optional[Path], init_box: Optional[str], stride: int
) -> Tuple[List[Image], List[Optional[BoundingBox]], BoundingBox]:
    """Frames, optional ground truth (resampled with the frames) and the initial box."""
    frames = load_sequence(sequence)
    if gt_path is None and (sequence / GT_NAME).is_file():
        gt_path = sequence / GT_NAME
    gt: List[Optional[BoundingBox]] = [None] * len(frames)
    if gt_path is not None:
        gt = load_ground_truth(gt_path)
        if len(gt) != len(frames):
            raise DataError(f"{gt_path} has {len(gt)} rows for {len(frames)} frames in {sequence}")
    frames, gt = resample_lowfps(frames, gt, stride)
    if init_box is not None:
        box = BoundingBox.from_xywh(parse_box(init_box))
    elif gt[0] is not None:
        box = gt[0]
    else:
        raise ConfigError("no initial box: pass --init-box or a ground truth whose first row is present")
    return frames, gt, box


def write_run(
    out: Path,
    cfg: RunConfig,
    records: Sequence[FrameRecord],
    frames: Sequence[Image],
    gt: Sequence[Optional[BoundingBox]],
    stride: int,
    overlays: bool,
    bound: bool,
    name: str,
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    trajectory = [r.estimate for r in records]
    write_trajectory(records, out / "trajectory.csv")
    write_timing(records, out / "timing.csv")
    manifest = {
        "config": cfg.model_dump(mode="json", exclude={"output_path"}),
        "seed": cfg.seed,
        "frames": len(frames),
        "stride": stride,
        "input_digest": digest_frames(frames),
        "trajectory_digest": digest_file(out / "trajectory.csv"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    if overlays:
        write_overlays(frames, trajectory, out / "overlays", gt)
    if any(g is not None for g in gt):
        curves = compute_curves(trajectory, gt)
        write_curves_csv(curves, out / "curves.csv")
        write_summary_json(summary_record(name, cfg.tracker, curves), out / "summary.json")
        logger.info("AUC %.3f, PS@20 %.3f", curves.auc, curves.ps20)
    if bound:
        if not any(g is not None for g in gt):
            raise ConfigError("--bound needs ground truth")
        upper = proposal_bound([r.proposals or [] for r in records], gt)
        write_summary_json(summary_record(name, "proposal-bound", upper), out / "bound.json")
        logger.info("Proposal bound: AUC %.3f, PS@20 %.3f", upper.auc, upper.ps20)


@click.command("track")
@click.argument("sequence", type=click.Path(path_type=Path))
@config_options
@click.option("--init-box", default=None, metavar="X,Y,W,H", help="0-based initial box; defaults to the first ground-truth row.")
@click.option("--gt", "gt_path", type=click.Path(path_type=Path), default=None, help=f"Ground truth; defaults to SEQUENCE/{GT_NAME}.")
@click.option("--stride", type=click.IntRange(min=1), default=1, help="Keep every n-th frame (low frame rate).")
@click.option("--overlays", is_flag=True, default=False, help="Write frames with the estimate drawn.")
@click.option("--bound", is_flag=True, default=False, help="Record the best-proposal upper bound.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory (runs/<sequence> by default).")
@handle
def app(
    sequence: Path,
    config_path: Optional[Path],
    assignments: Tuple[str, ...],
    seed: Optional[int],
    tracker: Optional[str],
    proposals: Optional[int],
    no_smoothness: bool,
    no_rerank: bool,
    test_set: Optional[str],
    update_set: Optional[str],
    init_box: Optional[str],
    gt_path: Optional[Path],
    stride: int,
    overlays: bool,
    bound: bool,
    out: Optional[Path],
):
    """
    Tracks the object through SEQUENCE (a directory of frames), writing
    trajectory.csv, manifest.json and timing.csv.
    """
    out = out or Path("runs") / sequence.name
    cfg = build_config(
        config_path, assignments, seed, tracker, proposals, no_smoothness, no_rerank, test_set, update_set,
        input_path=str(sequence), output_path=str(out),
    )
    frames, gt, box = resolve_inputs(sequence, gt_path, init_box, stride)
    with Progress(
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        transient=True,
    ) as progress:
        task = progress.add_task(f"Tracking {sequence.name}", total=len(frames))
        records = track_sequence(
            frames, box, cfg, keep_proposals=bound, on_frame=lambda _: progress.advance(task)
        )
    write_run(out, cfg, records, frames, gt, stride, overlays, bound, sequence.name)
    click.echo(str(out / "trajectory.csv"))
