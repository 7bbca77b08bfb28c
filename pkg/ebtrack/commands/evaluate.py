from pathlib import Path
from typing import Optional, Tuple

import click
from rich.console import Console
from rich.table import Table

from ..lib.evalharness import (
    aggregate,
    compute_curves,
    load_trajectory,
    summary_record,
    write_curves_csv,
    write_summary_json,
)
from ..lib.imgio import load_ground_truth
from ..lib.render import plot_curves
from ..utils import ConfigError, DataError, handle, setup_logging

logger = setup_logging(__name__)


def sequence_name(path: Path) -> str:
    """A run directory's name for trajectory.csv, the file stem otherwise."""
    return path.parent.name if path.stem == "trajectory" else path.stem


@click.command("eval")
@click.option("--traj", "trajectories", type=click.Path(path_type=Path), multiple=True, required=True)
@click.option("--gt", "truths", type=click.Path(path_type=Path), multiple=True, required=True)
@click.option("--tracker", "tracker_name", default="ebt", help="Label stored in the summaries.")
@click.option("--out", type=click.Path(path_type=Path), default=Path("eval"))
@click.option("--plot", "plot_path", type=click.Path(path_type=Path), default=None, help="Precision/success figure (svg, png).")
@handle
def app(
    trajectories: Tuple[Path, ...],
    truths: Tuple[Path, ...],
    tracker_name: str,
    out: Path,
    plot_path: Optional[Path],
):
    """
    Scores trajectories against ground truth, pairing the n-th --traj with
    the n-th --gt. Writes curves and a summary per sequence plus the mean.
    """
    if len(trajectories) != len(truths):
        raise ConfigError(f"{len(trajectories)} trajectories but {len(truths)} ground-truth files")
    records, curves_by_name = [], {}
    for traj_path, gt_path in zip(trajectories, truths):
        traj = load_trajectory(traj_path)
        gt = load_ground_truth(gt_path)
        if len(traj) != len(gt):
            raise DataError(f"{traj_path} has {len(traj)} frames but {gt_path} has {len(gt)}")
        name = sequence_name(traj_path)
        curves = compute_curves(traj, gt)
        write_curves_csv(curves, out / f"{name}.curves.csv")
        record = summary_record(name, tracker_name, curves)
        write_summary_json(record, out / f"{name}.summary.json")
        records.append(record)
        curves_by_name[name] = curves
    mean = aggregate(records)
    write_summary_json(mean, out / "aggregate.json")
    table = Table(title=f"One-pass evaluation ({tracker_name})")
    table.add_column("Sequence")
    table.add_column("AUC", justify="right")
    table.add_column("PS@20", justify="right")
    for r in records:
        table.add_row(r["sequence"], f"{r['auc']:.3f}", f"{r['ps20']:.3f}")
    table.add_row("[bold]mean[/bold]", f"{mean['auc']:.3f}", f"{mean['ps20']:.3f}")
    Console().print(table)
    if plot_path is not None:
        plot_curves(curves_by_name, plot_path)
        logger.info("Plot written to %s", plot_path)
