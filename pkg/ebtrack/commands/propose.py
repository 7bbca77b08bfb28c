from pathlib import Path
from typing import Optional, Tuple

import click

from ..lib.edgemap import build_edge_structures, write_edge_map, write_groups_csv
from ..lib.imgio import BoundingBox, load_image, save_image
from ..lib.objectness import propose, write_proposals_csv
from ..lib.render import overlay
from ..lib.rerank import init_rerank, rerank_select, top_by_objectness
from ..utils import handle, parse_box, setup_logging
from .options import build_config, config_options

logger = setup_logging(__name__)


@click.command("propose")
@click.argument("frame", type=click.Path(path_type=Path))
@click.option("--prev", "prev_box", required=True, metavar="X,Y,W,H", help="0-based previous box.")
@config_options
@click.option("--edges", is_flag=True, default=False, help="Also write the edge map and the edge groups.")
@click.option("--out", type=click.Path(path_type=Path), default=Path("proposals"))
@handle
def app(
    frame: Path,
    prev_box: str,
    config_path: Optional[Path],
    assignments: Tuple[str, ...],
    seed: Optional[int],
    tracker: Optional[str],
    proposals: Optional[int],
    no_smoothness: bool,
    no_rerank: bool,
    test_set: Optional[str],
    update_set: Optional[str],
    edges: bool,
    out: Path,
):
    """
    Proposal debugging view of one FRAME: the thresholded, suppressed pool
    (pool.csv) and the re-ranked selection (proposals.csv, overlay.ppm).
    The re-ranker is trained on this frame with --prev as the object.
    """
    cfg = build_config(config_path, assignments, seed, tracker, proposals, no_smoothness, no_rerank, test_set, update_set)
    img = load_image(frame)
    prev = BoundingBox.from_xywh(parse_box(prev_box))
    es = build_edge_structures(img, cfg)
    pool = propose(es, prev, cfg)
    if cfg.rerank_enabled:
        model = init_rerank(prev, pool, es, cfg, cfg, seed=cfg.seed)
        selected = rerank_select(pool, model, es, cfg.max_proposals, cfg)
    else:
        selected = top_by_objectness(pool, cfg.max_proposals)
    out.mkdir(parents=True, exist_ok=True)
    write_proposals_csv(pool, out / "pool.csv")
    write_proposals_csv(selected, out / "proposals.csv")
    save_image(overlay(img, estimate=prev, proposals=[s.box for s in selected]), out / "overlay.ppm")
    if edges:
        write_edge_map(es, out / "edges.pgm")
        write_groups_csv(es, out / "groups.csv")
    logger.info("%d edge groups, %d proposals in the pool, %d selected", es.group_count, len(pool), len(selected))
    click.echo(str(out / "proposals.csv"))
