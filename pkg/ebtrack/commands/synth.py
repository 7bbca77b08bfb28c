from pathlib import Path
from typing import Optional

import click

from ..lib.evalharness import load_synth_spec, synth_sequence, write_sequence
from ..utils import handle, setup_logging

logger = setup_logging(__name__)


@click.command("synth")
@click.argument("spec", type=click.Path(path_type=Path))
@click.option("--seed", type=int, default=None, help="Replaces the seed of the spec.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Sequence directory (sequences/<name> by default).")
@handle
def app(spec: Path, seed: Optional[int], out: Optional[Path]):
    """
    Renders the synthetic sequence described by the JSON file SPEC into a
    frame directory with its ground truth.
    """
    parsed = load_synth_spec(spec)
    if seed is not None:
        parsed = parsed.model_copy(update={"seed": seed})
    seq = synth_sequence(parsed)
    directory = write_sequence(seq, out or Path("sequences") / parsed.name)
    logger.info("%d frames written to %s, teleports at %s", len(seq.frames), directory, seq.teleport_frames or "none")
    click.echo(str(directory))
