"""
One-pass evaluation, precision/success curves, low frame-rate resampling
and seeded synthetic sequences for desk-scale experiments.
"""
import asyncio
import csv
import json
import math
from pathlib import Path
from time import perf_counter
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from PIL import ImageDraw
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..utils import ConfigError, DataError, async_cpu, describe_validation_error, setup_logging
from .config import RunConfig
from .imgio import (
    BoundingBox,
    Image,
    boxes_to_array,
    iou,
    iou_array,
    load_ground_truth,
    save_image,
    write_ground_truth,
)
from .pipeline import FrameRecord, track_sequence

logger = setup_logging(__name__)

SUCCESS_THRESHOLDS = np.round(np.arange(21) * 0.05, 2)
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)
PS_THRESHOLD = 20

PathLike = Union[str, Path]

__all__ = [
    "MetricCurves",
    "OpeResult",
    "SynthSequence",
    "SynthSpec",
    "Teleport",
    "aggregate",
    "build_suite",
    "center_error",
    "compute_curves",
    "iou",
    "load_trajectory",
    "proposal_bound",
    "reacquisition",
    "resample_lowfps",
    "run_batch",
    "run_ope",
    "synth_sequence",
    "write_curves_csv",
    "write_sequence",
    "write_summary_json",
    "write_trajectory",
]


class MetricCurves(BaseModel):
    model_config = ConfigDict(frozen=True)

    precision: List[float]
    success: List[float]
    auc: float
    ps20: float
    frames: int


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return math.hypot(ax - bx, ay - by)


def _curves(ious: np.ndarray, errors: np.ndarray) -> MetricCurves:
    n = len(ious)
    if n == 0:
        zero_p = [0.0] * len(PRECISION_THRESHOLDS)
        zero_s = [0.0] * len(SUCCESS_THRESHOLDS)
        return MetricCurves(precision=zero_p, success=zero_s, auc=0.0, ps20=0.0, frames=0)
    success = [float(v) for v in (ious[:, None] >= SUCCESS_THRESHOLDS[None, :]).sum(axis=0) / n]
    precision = [float(v) for v in (errors[:, None] <= PRECISION_THRESHOLDS[None, :]).sum(axis=0) / n]
    return MetricCurves(
        precision=precision,
        success=success,
        auc=sum(success) / len(success),
        ps20=precision[PS_THRESHOLD],
        frames=n,
    )


def compute_curves(traj: Sequence[BoundingBox], gt: Sequence[Optional[BoundingBox]]) -> MetricCurves:
    """
    Success (IoU >= t) and precision (centre error <= t) curves over the
    frames whose ground truth is present.
    """
    if len(traj) != len(gt):
        raise DataError(f"trajectory has {len(traj)} frames, ground truth {len(gt)}")
    pairs = [(t, g) for t, g in zip(traj, gt) if g is not None]
    ious = np.array([iou(t, g) for t, g in pairs], dtype=np.float64)
    errors = np.array([center_error(t, g) for t, g in pairs], dtype=np.float64)
    return _curves(ious, errors)


def proposal_bound(
    candidates_per_frame: Sequence[Sequence[BoundingBox]], gt: Sequence[Optional[BoundingBox]]
) -> MetricCurves:
    """
    Curves of the best-overlapping candidate on every frame: what a perfect
    classifier could reach with these candidate sets.
    """
    if len(candidates_per_frame) != len(gt):
        raise DataError(f"{len(candidates_per_frame)} candidate sets for {len(gt)} frames")
    ious, errors = [], []
    for candidates, g in zip(candidates_per_frame, gt):
        if g is None:
            continue
        if not candidates:
            ious.append(0.0)
            errors.append(math.inf)
            continue
        overlap = iou_array(g.as_tuple(), boxes_to_array(list(candidates)))
        best = int(np.argmax(overlap))
        ious.append(float(overlap[best]))
        errors.append(center_error(candidates[best], g))
    return _curves(np.array(ious, dtype=np.float64), np.array(errors, dtype=np.float64))


def reacquisition(
    traj: Sequence[BoundingBox],
    gt: Sequence[Optional[BoundingBox]],
    event_frames: Sequence[int],
    window: int = 5,
    threshold: float = 0.5,
) -> List[bool]:
    """
    Per event, whether some frame from the event through `window` frames
    later has IoU >= threshold with the ground truth.
    """
    outcome = []
    for event in event_frames:
        frames = range(event, min(event + window + 1, len(traj)))
        outcome.append(any(gt[f] is not None and iou(traj[f], gt[f]) >= threshold for f in frames))
    return outcome


def resample_lowfps(
    frames: Sequence[Image], gt: Sequence[Optional[BoundingBox]], stride: int
) -> Tuple[List[Image], List[Optional[BoundingBox]]]:
    """Keeps frames 0, stride, 2 stride, ... with their ground truth."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    return list(frames[::stride]), list(gt[::stride])


class OpeResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str = ""
    trajectory: List[BoundingBox]
    records: List[FrameRecord]
    curves: MetricCurves
    fps: float


def run_ope(
    frames: Sequence[Image],
    gt: Sequence[Optional[BoundingBox]],
    cfg: RunConfig,
    name: str = "",
    keep_proposals: bool = False,
) -> OpeResult:
    """
    One-pass evaluation: initialise on the first ground-truth box, track to
    the end without re-initialisation, score the trajectory.
    """
    if not frames:
        raise DataError("empty sequence")
    if len(gt) != len(frames):
        raise DataError(f"{len(frames)} frames but {len(gt)} ground-truth rows")
    if gt[0] is None:
        raise DataError("ground truth of the first frame is absent")
    start = perf_counter()
    records = track_sequence(frames, gt[0], cfg, keep_proposals=keep_proposals)
    elapsed = perf_counter() - start
    trajectory = [r.estimate for r in records]
    curves = compute_curves(trajectory, gt)
    logger.info("%s: AUC %.3f, PS@20 %.3f over %d frames", name or "sequence", curves.auc, curves.ps20, len(frames))
    return OpeResult(
        name=name,
        trajectory=trajectory,
        records=records,
        curves=curves,
        fps=len(frames) / elapsed if elapsed > 0 else 0.0,
    )


class BatchJob(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str
    frames: List[Image]
    gt: List[Optional[BoundingBox]]
    cfg: RunConfig


@async_cpu
def _run_job(job: BatchJob) -> OpeResult:
    return run_ope(job.frames, job.gt, job.cfg, name=job.name)


async def run_batch(jobs: Sequence[BatchJob]) -> List[OpeResult]:
    """Evaluates independent sequences concurrently; results keep job order."""
    return list(await asyncio.gather(*(_run_job(job) for job in jobs)))


class Teleport(BaseModel):
    """
    Jump of the object on `frame`. A jump that would leave the frame is
    mirrored, then clamped to the frame.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    frame: int = Field(ge=1)
    dx: int = 0
    dy: int = 0


class SynthSpec(BaseModel):
    """A textured rectangle moving over static clutter."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "synthetic"
    width: int = Field(default=320, ge=8)
    height: int = Field(default=240, ge=8)
    frames: int = Field(default=100, ge=1)
    object_w: int = Field(default=40, ge=4)
    object_h: int = Field(default=40, ge=4)
    start: Optional[Tuple[int, int]] = None
    seed: int = 0
    texture_seed: Optional[int] = None
    motion: Literal["static", "random_walk", "linear", "explicit"] = "random_walk"
    max_step: int = Field(default=6, ge=0)
    velocity: Tuple[int, int] = (0, 0)
    steps: List[Tuple[int, int]] = Field(default_factory=list)
    teleports: List[Teleport] = Field(default_factory=list)
    texture_cell: int = Field(default=4, ge=1)
    border: int = Field(default=2, ge=0)
    background: int = Field(default=110, ge=0, le=255)
    noise: int = Field(default=12, ge=0, le=127)
    distractors: int = Field(default=12, ge=0)

    @model_validator(mode="after")
    def _object_fits(self) -> "SynthSpec":
        if self.object_w > self.width or self.object_h > self.height:
            raise ValueError(
                f"object {self.object_w}x{self.object_h} does not fit a {self.width}x{self.height} frame"
            )
        return self


class SynthSequence(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    spec: SynthSpec
    frames: List[Image]
    gt: List[BoundingBox]
    teleport_frames: List[int]


def load_synth_spec(path: PathLike) -> SynthSpec:
    try:
        return SynthSpec.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read spec {path}: {exc}") from exc
    except ValidationError as exc:
        raise ConfigError(f"{path}: {describe_validation_error(exc)}") from exc


def _texture(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    cells_y = -(-spec.object_h // spec.texture_cell)
    cells_x = -(-spec.object_w // spec.texture_cell)
    cells = rng.integers(0, 256, size=(cells_y, cells_x, 3), dtype=np.int64)
    # Keep the interior away from the border colour.
    cells = 64 + (cells * 191) // 255
    texture = np.repeat(np.repeat(cells, spec.texture_cell, axis=0), spec.texture_cell, axis=1)
    texture = texture[: spec.object_h, : spec.object_w].astype(np.uint8)
    if spec.border:
        b = spec.border
        texture[:b, :] = 0
        texture[-b:, :] = 0
        texture[:, :b] = 0
        texture[:, -b:] = 0
    return texture


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    noise = rng.integers(-spec.noise, spec.noise + 1, size=(spec.height, spec.width), dtype=np.int64)
    plane = np.clip(spec.background + noise, 0, 255).astype(np.uint8)
    canvas = PILImage.fromarray(np.stack([plane] * 3, axis=2), mode="RGB")
    draw = ImageDraw.Draw(canvas)
    for _ in range(spec.distractors):
        x0 = int(rng.integers(0, spec.width))
        y0 = int(rng.integers(0, spec.height))
        length = int(rng.integers(8, 26))
        angle = float(rng.random()) * math.pi
        x1 = int(round(x0 + length * math.cos(angle)))
        y1 = int(round(y0 + length * math.sin(angle)))
        shade = int(rng.integers(0, 2)) * 200 + int(rng.integers(0, 40))
        draw.line([(x0, y0), (x1, y1)], fill=(shade, shade, shade), width=1)
    return np.asarray(canvas, dtype=np.uint8)


def _positions(spec: SynthSpec, rng: np.random.Generator) -> Tuple[List[Tuple[int, int]], List[int]]:
    max_x, max_y = spec.width - spec.object_w, spec.height - spec.object_h
    if spec.start is None:
        x, y = max_x // 2, max_y // 2
    else:
        x, y = spec.start
    jumps = {t.frame: t for t in spec.teleports}
    positions = []
    teleported = []
    for t in range(spec.frames):
        if t > 0:
            if spec.motion == "random_walk":
                dx, dy = (int(v) for v in rng.integers(-spec.max_step, spec.max_step + 1, size=2))
                x = min(max(x + dx, 0), max_x)
                y = min(max(y + dy, 0), max_y)
            elif spec.motion == "linear":
                x, y = x + spec.velocity[0], y + spec.velocity[1]
            elif spec.motion == "explicit":
                dx, dy = spec.steps[t - 1] if t - 1 < len(spec.steps) else (0, 0)
                x, y = x + dx, y + dy
            if t in jumps:
                jump = jumps[t]
                dx = jump.dx if 0 <= x + jump.dx <= max_x else -jump.dx
                dy = jump.dy if 0 <= y + jump.dy <= max_y else -jump.dy
                x = min(max(x + dx, 0), max_x)
                y = min(max(y + dy, 0), max_y)
                teleported.append(t)
        if x + spec.object_w <= 0 or y + spec.object_h <= 0 or x >= spec.width or y >= spec.height:
            raise ConfigError(f"motion moves the object fully out of the frame at frame {t}")
        positions.append((x, y))
    return positions, teleported


def synth_sequence(spec: SynthSpec) -> SynthSequence:
    """
    Renders the sequence and its exact ground truth. Same spec, same pixels.
    """
    rng = np.random.default_rng(spec.seed)
    texture_rng = np.random.default_rng(spec.seed + 1 if spec.texture_seed is None else spec.texture_seed)
    texture = _texture(spec, texture_rng)
    background = _background(spec, rng)
    positions, teleported = _positions(spec, rng)
    frames, gt = [], []
    for x, y in positions:
        canvas = background.copy()
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + spec.object_w, spec.width), min(y + spec.object_h, spec.height)
        canvas[y0:y1, x0:x1] = texture[y0 - y : y1 - y, x0 - x : x1 - x]
        frames.append(Image(pixels=canvas))
        gt.append(BoundingBox(x=float(x), y=float(y), w=float(spec.object_w), h=float(spec.object_h)))
    return SynthSequence(spec=spec, frames=frames, gt=gt, teleport_frames=teleported)


def write_sequence(seq: SynthSequence, directory: PathLike) -> Path:
    """Frames as 0001.ppm, ..., groundtruth_rect.txt and sequence.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(seq.frames, start=1):
        save_image(frame, directory / f"{index:04d}.ppm")
    write_ground_truth(directory / "groundtruth_rect.txt", seq.gt)
    record = {"spec": seq.spec.model_dump(mode="json"), "teleport_frames": seq.teleport_frames}
    (directory / "sequence.json").write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def read_event_frames(directory: PathLike) -> List[int]:
    """Teleport frames recorded next to a generated sequence, none otherwise."""
    path = Path(directory) / "sequence.json"
    if not path.is_file():
        return []
    try:
        return [int(v) for v in json.loads(path.read_text(encoding="utf-8")).get("teleport_frames", [])]
    except (ValueError, AttributeError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def build_suite(
    count: int,
    frames: int = 100,
    teleport: bool = True,
    seed: int = 0,
    width: int = 320,
    height: int = 240,
    object_size: int = 40,
    max_step: int = 6,
    jump: int = 150,
) -> List[SynthSpec]:
    """
    Seeded suite of specs. With `teleport` every sequence gets one horizontal
    jump of `jump` px somewhere in its middle third.
    """
    rng = np.random.default_rng(seed)
    specs = []
    for k in range(count):
        teleports = []
        if teleport and frames > 3:
            frame = int(rng.integers(max(1, frames // 3), max(2, 2 * frames // 3)))
            teleports.append(Teleport(frame=frame, dx=jump if rng.random() < 0.5 else -jump))
        specs.append(
            SynthSpec(
                name=f"suite-{seed}-{k:02d}",
                width=width,
                height=height,
                frames=frames,
                object_w=object_size,
                object_h=object_size,
                seed=seed * 1000 + k,
                motion="random_walk",
                max_step=max_step,
                teleports=teleports,
            )
        )
    return specs


def write_trajectory(records: Sequence[FrameRecord], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["frame", "x", "y", "w", "h", "score"])
        for r in records:
            b = r.estimate
            writer.writerow([r.index, f"{b.x:.6f}", f"{b.y:.6f}", f"{b.w:.6f}", f"{b.h:.6f}", f"{r.score:.9f}"])


def load_trajectory(path: PathLike) -> List[BoundingBox]:
    """
    Reads a trajectory CSV written by `write_trajectory` (0-based) or an
    OTB-style box file (1-based).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"trajectory file {path} does not exist")
    with path.open(encoding="utf-8") as handle:
        first = handle.readline()
    if not first.startswith("frame"):
        boxes = load_ground_truth(path)
        if any(b is None for b in boxes):
            raise DataError(f"{path}: trajectory rows must all be valid boxes")
        return boxes
    boxes = []
    with path.open(encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            try:
                boxes.append(BoundingBox(x=float(row["x"]), y=float(row["y"]), w=float(row["w"]), h=float(row["h"])))
            except (KeyError, ValueError, ValidationError) as exc:
                raise DataError(f"{path}: bad trajectory row {row}") from exc
    return boxes


def write_curves_csv(curves: MetricCurves, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["curve", "threshold", "value"])
        for t, v in zip(SUCCESS_THRESHOLDS, curves.success):
            writer.writerow(["success", f"{t:.2f}", f"{v:.6f}"])
        for t, v in zip(PRECISION_THRESHOLDS, curves.precision):
            writer.writerow(["precision", f"{t:.0f}", f"{v:.6f}"])


def summary_record(sequence: str, tracker: str, curves: MetricCurves, fps: Optional[float] = None) -> Dict[str, Any]:
    return {"sequence": sequence, "tracker": tracker, "auc": curves.auc, "ps20": curves.ps20, "fps": fps}


def write_summary_json(record: Dict[str, Any], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")


def aggregate(records: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """Unweighted means over sequences."""
    if not records:
        raise DataError("nothing to aggregate")
    fps = [r["fps"] for r in records if r.get("fps") is not None]
    return {
        "sequences": len(records),
        "auc": sum(r["auc"] for r in records) / len(records),
        "ps20": sum(r["ps20"] for r in records) / len(records),
        "fps": sum(fps) / len(fps) if fps else None,
    }
