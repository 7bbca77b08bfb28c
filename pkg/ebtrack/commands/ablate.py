import asyncio
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
from rich.console import Console
from rich.table import Table

from ..lib.config import RunConfig, apply_overrides
from ..lib.evalharness import BatchJob, OpeResult, build_suite, read_event_frames, reacquisition, run_batch, synth_sequence
from ..lib.imgio import BoundingBox, Image, load_ground_truth, load_sequence
from ..utils import ConfigError, DataError, handle, setup_logging
from .options import build_config, config_options
from .track import GT_NAME

logger = setup_logging(__name__)

SETS = ("R", "E", "E+R")

Sequence_ = Tuple[str, List[Image], List[Optional[BoundingBox]], List[int]]


def load_inputs(directories: Tuple[Path, ...]) -> List[Sequence_]:
    inputs = []
    for directory in directories:
        frames = load_sequence(directory)
        gt = load_ground_truth(directory / GT_NAME)
        if len(gt) != len(frames):
            raise DataError(f"{directory / GT_NAME} has {len(gt)} rows for {len(frames)} frames")
        inputs.append((directory.name, frames, gt, read_event_frames(directory)))
    return inputs


def suite_inputs(count: int, frames: int, teleport: bool, seed: int, max_step: int) -> List[Sequence_]:
    inputs = []
    for spec in build_suite(count, frames=frames, teleport=teleport, seed=seed, max_step=max_step):
        seq = synth_sequence(spec)
        inputs.append((spec.name, seq.frames, list(seq.gt), seq.teleport_frames))
    return inputs


def cell_summary(results: List[OpeResult], inputs: List[Sequence_], window: int) -> Dict[str, Optional[float]]:
    events: List[bool] = []
    for result, (_, _, gt, event_frames) in zip(results, inputs):
        events.extend(reacquisition(result.trajectory, gt, event_frames, window=window))
    return {
        "auc": sum(r.curves.auc for r in results) / len(results),
        "ps20": sum(r.curves.ps20 for r in results) / len(results),
        "reacquisition": sum(events) / len(events) if events else None,
        "events": len(events),
    }


def run_grid(
    base: RunConfig, inputs: List[Sequence_], tests: Tuple[str, ...], updates: Tuple[str, ...], window: int
) -> Dict[str, Dict[str, Optional[float]]]:
    grid = {}
    for test in tests:
        for update in updates:
            cfg = apply_overrides(base, {"test_set": test, "update_set": update})
            jobs = [BatchJob(name=name, frames=frames, gt=gt, cfg=cfg) for name, frames, gt, _ in inputs]
            results = asyncio.run(run_batch(jobs))
            grid[f"{test}/{update}"] = cell_summary(results, inputs, window)
            logger.info("test=%s update=%s: AUC %.3f", test, update, grid[f"{test}/{update}"]["auc"])
    return grid


@click.command("ablate")
@click.argument("sequences", nargs=-1, type=click.Path(path_type=Path))
@config_options
@click.option("--suite", type=int, default=None, help="Generate a synthetic suite of this many sequences instead.")
@click.option("--frames", type=click.IntRange(min=2), default=100, help="Frames per generated sequence.")
@click.option("--teleport/--no-teleport", default=True, help="One jump per generated sequence.")
@click.option("--max-step", type=click.IntRange(min=0), default=6, help="Random-walk step of generated sequences.")
@click.option("--window", type=click.IntRange(min=0), default=5, help="Frames allowed for reacquisition.")
@click.option("--out", type=click.Path(path_type=Path), default=Path("ablation.json"))
@handle
def app(
    sequences: Tuple[Path, ...],
    config_path: Optional[Path],
    assignments: Tuple[str, ...],
    seed: Optional[int],
    tracker: Optional[str],
    proposals: Optional[int],
    no_smoothness: bool,
    no_rerank: bool,
    test_set: Optional[str],
    update_set: Optional[str],
    suite: Optional[int],
    frames: int,
    teleport: bool,
    max_step: int,
    window: int,
    out: Path,
):
    """
    Runs every test-set x update-set combination over SEQUENCES (frame
    directories with ground truth) or a generated suite. --test-set and
    --update-set restrict the grid to one row or column.
    """
    if bool(sequences) == (suite is not None):
        raise ConfigError("pass sequence directories or --suite, not both or neither")
    base = build_config(config_path, assignments, seed, tracker, proposals, no_smoothness, no_rerank)
    inputs = load_inputs(sequences) if sequences else suite_inputs(suite, frames, teleport, base.seed, max_step)
    tests = (test_set,) if test_set else SETS
    updates = (update_set,) if update_set else SETS
    grid = run_grid(base, inputs, tests, updates, window)
    table = Table(title=f"Candidate-set ablation over {len(inputs)} sequences")
    for column in ("Test", "Update", "AUC", "PS@20", "Reacquired"):
        table.add_column(column, justify="right" if column not in ("Test", "Update") else "left")
    for key, cell in grid.items():
        test, update = key.split("/")
        rate = "-" if cell["reacquisition"] is None else f"{cell['reacquisition']:.2f} ({cell['events']})"
        table.add_row(test, update, f"{cell['auc']:.3f}", f"{cell['ps20']:.3f}", rate)
    Console().print(table)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(
        json.dumps({"config": base.model_dump(mode="json"), "sequences": [i[0] for i in inputs], "grid": grid}, indent=2),
        encoding="utf-8",
    )
    click.echo(str(out))
