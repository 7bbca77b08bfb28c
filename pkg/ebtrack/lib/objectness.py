"""
Whole-frame candidate boxes scored by how many edge groups they wholly
enclose, thresholded and suppressed into the proposal pool.
"""
import csv
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse

from ..utils import chunker, setup_logging
from .config import ProposalConfig
from .edgemap import EdgeStructures
from .imgio import BoundingBox, array_to_boxes, boxes_to_array, iou_array, round_half_up

logger = setup_logging(__name__)

# Slack kept when pruning on the enclosure upper bound so rounding in the
# bound never drops a box whose exact score reaches the floor.
PRUNE_MARGIN = 1e-9


class ScoredBox(BaseModel):
    model_config = ConfigDict(frozen=True)

    box: BoundingBox
    objectness: float = Field(ge=0.0)
    rerank_score: Optional[float] = None


BoxesLike = Union[Sequence[BoundingBox], np.ndarray]


def _as_array(boxes: BoxesLike) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return boxes_to_array(list(boxes))


def _pixel_edges(start: np.ndarray, length: np.ndarray, limit: int) -> Tuple[np.ndarray, np.ndarray]:
    lo = np.clip(np.floor(start + 0.5), 0, limit).astype(np.int64)
    hi = np.clip(np.floor(start + length + 0.5), 0, limit).astype(np.int64)
    return lo, np.maximum(hi, lo)


def _center_mass(arr: np.ndarray, es: EdgeStructures) -> np.ndarray:
    """Grouped magnitude inside the centred half-size box of each row."""
    x, y, w, h = arr.T
    x0, x1 = _pixel_edges(x + w / 4.0, w / 2.0, es.width)
    y0, y1 = _pixel_edges(y + h / 4.0, h / 2.0, es.height)
    s = es.integral
    return s[y1, x1] - s[y0, x1] - s[y1, x0] + s[y0, x0]


def _normaliser(w: np.ndarray, h: np.ndarray, kappa: float) -> np.ndarray:
    return 2.0 * np.power(w + h, kappa)


def _chain_strengths(
    straddle: np.ndarray, inside: np.ndarray, es: EdgeStructures, floor: float
) -> np.ndarray:
    """
    (B, G) strongest affinity-chain product reaching each interior group from
    a straddling group through interior groups; 0 where no chain reaches
    `floor`.

    Max-product relaxation over the affinity edges among the groups the rows
    touch. All rows relax together until no strength improves.
    """
    best = np.zeros(straddle.shape, dtype=np.float64)
    touched = np.flatnonzero((straddle | inside).any(axis=0))
    if touched.size < 2 or not es.adjacency.nnz:
        return best
    sub = es.adjacency[touched][:, touched].tocsr()
    if not sub.nnz:
        return best
    counts = np.diff(sub.indptr)
    targets = np.flatnonzero(counts)
    starts = sub.indptr[:-1][targets]
    dst = np.repeat(np.arange(touched.size), counts)
    src, weight = sub.indices, sub.data
    st, ins = straddle[:, touched], inside[:, touched]
    closed = ~ins[:, dst]
    local = np.zeros(st.shape, dtype=np.float64)
    strength = st.astype(np.float64)
    while True:
        cand = strength[:, src] * weight
        cand[closed | (cand < floor)] = 0.0
        reached = np.maximum.reduceat(cand, starts, axis=1)
        current = local[:, targets]
        improved = reached > current
        if not improved.any():
            break
        local[:, targets] = np.where(improved, reached, current)
        strength = np.where(st, 1.0, local)
    best[:, touched] = local
    return best


def chain_decay(
    straddlers: np.ndarray, interior: np.ndarray, es: EdgeStructures, floor: float
) -> float:
    """
    Sum over interior groups of m_i times the strongest affinity chain
    reaching it from a straddling group through interior groups, chains
    under `floor` pruned.
    """
    straddle = np.zeros((1, es.group_count), dtype=bool)
    straddle[0, np.asarray(straddlers, dtype=np.int64)] = True
    inside = np.asarray(interior, dtype=bool).reshape(1, -1)
    best = _chain_strengths(straddle, inside, es, floor)
    return float((best * es.group_mass).sum(axis=1)[0])


def score_boxes(boxes: BoxesLike, es: EdgeStructures, cfg: Optional[ProposalConfig] = None) -> np.ndarray:
    """
    Objectness of every box.

    A group is interior when its bounding rectangle lies inside the box's
    pixel bounds and straddles when it overlaps without being contained.
    Interior groups count with weight 1 - (best affinity chain from a
    straddler); the grouped magnitude of the centred half box is then
    subtracted and the result normalised by 2 (w + h)^kappa, floored at 0.
    """
    cfg = cfg or ProposalConfig()
    arr = _as_array(boxes)
    out = np.zeros(len(arr), dtype=np.float64)
    if not len(arr) or not es.group_count:
        return out
    x, y, w, h = arr.T
    x0, x1 = _pixel_edges(x, w, es.width)
    y0, y1 = _pixel_edges(y, h, es.height)
    valid = (w >= 2) & (h >= 2) & (x1 > x0) & (y1 > y0)
    center = _center_mass(arr, es)
    norm = _normaliser(w, h, cfg.kappa)
    gb, mass = es.group_bounds, es.group_mass
    for rows in chunker(np.flatnonzero(valid), cfg.score_chunk):
        bx0, by0, bx1, by1 = x0[rows, None], y0[rows, None], x1[rows, None], y1[rows, None]
        inside = (gb[:, 0] >= bx0) & (gb[:, 2] < bx1) & (gb[:, 1] >= by0) & (gb[:, 3] < by1)
        overlap = (gb[:, 0] < bx1) & (gb[:, 2] >= bx0) & (gb[:, 1] < by1) & (gb[:, 3] >= by0)
        straddle = overlap & ~inside
        interior_mass = np.where(inside, mass, 0.0).sum(axis=1)
        decay = np.zeros(len(rows), dtype=np.float64)
        if es.adjacency.nnz:
            reach = (sparse.csr_matrix(straddle.astype(np.float64)) @ es.adjacency).toarray() > 0
            sel = np.flatnonzero((reach & inside).any(axis=1))
            if sel.size:
                best = _chain_strengths(straddle[sel], inside[sel], es, cfg.chain_floor)
                decay[sel] = (best * mass).sum(axis=1)
        raw = interior_mass - decay - center[rows]
        out[rows] = np.maximum(0.0, raw / norm[rows])
    return out
    x, y, w, h = arr.T
    x0, x1 = _pixel_edges(x, w, es.width)
    y0, y1 = _pixel_edges(y, h, es.height)
    valid = (w >= 2) & (h >= 2) & (x1 > x0) & (y1 > y0)
    center = _center_mass(arr, es)
    norm = _normaliser(w, h, cfg.kappa)
    gb, mass = es.group_bounds, es.group_mass
    for rows in chunker(np.flatnonzero(valid), cfg.score_chunk):
        bx0, by0, bx1, by1 = x0[rows, None], y0[rows, None], x1[rows, None], y1[rows, None]
        inside = (gb[:, 0] >= bx0) & (gb[:, 2] < bx1) & (gb[:, 1] >= by0) & (gb[:, 3] < by1)
        overlap = (gb[:, 0] < bx1) & (gb[:, 2] >= bx0) & (gb[:, 1] < by1) & (gb[:, 3] >= by0)
        straddle = overlap & ~inside
        interior_mass = np.where(inside, mass, 0.0).sum(axis=1)
        decay = np.zeros(len(rows), dtype=np.float64)
        if es.adjacency.nnz:
            reach = (sparse.csr_matrix(straddle.astype(np.float64)) @ es.adjacency).toarray() > 0
            for k in np.flatnonzero((reach & inside).any(axis=1)):
                decay[k] = chain_decay(np.flatnonzero(straddle[k]), inside[k], es, cfg.chain_floor)
        raw = interior_mass - decay - center[rows]
        out[rows] = np.maximum(0.0, raw / norm[rows])
    return out


def score_box(b: BoundingBox, es: EdgeStructures, cfg: Optional[ProposalConfig] = None) -> float:
    return float(score_boxes([b], es, cfg)[0])


def candidate_sizes(prev: BoundingBox, frame_w: int, frame_h: int, cfg: ProposalConfig) -> List[Tuple[int, int]]:
    """
    Integer (w, h) pairs on the geometric grid around prev's size whose area
    stays within the configured bounds and which fit in the frame.
    """
    steps = range(-cfg.aspect_steps, cfg.aspect_steps + 1)
    lo, hi = cfg.area_min * prev.area, cfg.area_max * prev.area
    sizes = set()
    for kw in steps:
        bw = round_half_up(prev.w * cfg.step_alpha ** (-kw))
        for kh in steps:
            bh = round_half_up(prev.h * cfg.step_alpha ** (-kh))
            if bw < 1 or bh < 1 or bw > frame_w or bh > frame_h:
                continue
            if lo <= bw * bh <= hi:
                sizes.add((bw, bh))
    return sorted(sizes)


def grid_positions(limit: int, delta: float) -> np.ndarray:
    """Offsets 0, delta, 2 delta, ... up to `limit`, plus `limit` itself."""
    count = int(math.floor(limit / delta)) + 1
    steps = np.floor(np.arange(count) * delta + 0.5).astype(np.int64)
    return np.unique(np.append(steps[steps <= limit], limit))


def _size_grid(bw: int, bh: int, frame_w: int, frame_h: int, cfg: ProposalConfig) -> Tuple[np.ndarray, np.ndarray]:
    delta = max(1.0, (1.0 - cfg.step_alpha) * min(bw, bh))
    return grid_positions(frame_w - bw, delta), grid_positions(frame_h - bh, delta)


def candidate_array(prev: BoundingBox, frame_w: int, frame_h: int, cfg: Optional[ProposalConfig] = None) -> np.ndarray:
    """(n, 4) integer-valued candidate boxes, grouped by size."""
    cfg = cfg or ProposalConfig()
    blocks = []
    for bw, bh in candidate_sizes(prev, frame_w, frame_h, cfg):
        xs, ys = _size_grid(bw, bh, frame_w, frame_h, cfg)
        gx, gy = np.meshgrid(xs, ys)
        block = np.empty((gx.size, 4), dtype=np.float64)
        block[:, 0], block[:, 1], block[:, 2], block[:, 3] = gx.ravel(), gy.ravel(), bw, bh
        blocks.append(block)
    if not blocks:
        return np.zeros((0, 4), dtype=np.float64)
    return np.concatenate(blocks)


def generate_candidates(
    prev: BoundingBox, frame_w: int, frame_h: int, cfg: Optional[ProposalConfig] = None
) -> List[BoundingBox]:
    return array_to_boxes(candidate_array(prev, frame_w, frame_h, cfg))


def _interior_mass_grid(es: EdgeStructures, bw: int, bh: int) -> np.ndarray:
    """
    Interior group mass for every integer placement of a bw x bh box,
    indexed [y, x], via a 2-D difference array.
    """
    nx, ny = es.width - bw + 1, es.height - bh + 1
    diff = np.zeros((ny + 1, nx + 1), dtype=np.float64)
    gb = es.group_bounds
    xlo = np.maximum(gb[:, 2] - bw + 1, 0)
    xhi = np.minimum(gb[:, 0], nx - 1)
    ylo = np.maximum(gb[:, 3] - bh + 1, 0)
    yhi = np.minimum(gb[:, 1], ny - 1)
    ok = (xlo <= xhi) & (ylo <= yhi)
    m = es.group_mass[ok]
    xlo, xhi, ylo, yhi = xlo[ok], xhi[ok] + 1, ylo[ok], yhi[ok] + 1
    np.add.at(diff, (ylo, xlo), m)
    np.add.at(diff, (ylo, xhi), -m)
    np.add.at(diff, (yhi, xlo), -m)
    np.add.at(diff, (yhi, xhi), m)
    return diff.cumsum(axis=0).cumsum(axis=1)[:ny, :nx]


def _bounded_candidates(
    es: EdgeStructures, prev: BoundingBox, cfg: ProposalConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Candidates whose enclosure upper bound can still reach the floor, with
    that bound.
    """
    blocks, bounds = [], []
    total = 0
    for bw, bh in candidate_sizes(prev, es.width, es.height, cfg):
        xs, ys = _size_grid(bw, bh, es.width, es.height, cfg)
        total += xs.size * ys.size
        interior = _interior_mass_grid(es, bw, bh)[np.ix_(ys, xs)]
        gx, gy = np.meshgrid(xs, ys)
        block = np.empty((gx.size, 4), dtype=np.float64)
        block[:, 0], block[:, 1], block[:, 2], block[:, 3] = gx.ravel(), gy.ravel(), bw, bh
        bound = (interior.ravel() - _center_mass(block, es)) / _normaliser(block[:, 2], block[:, 3], cfg.kappa)
        keep = bound >= cfg.objectness_floor - PRUNE_MARGIN
        if keep.any():
            blocks.append(block[keep])
            bounds.append(bound[keep])
    kept = sum(len(b) for b in blocks)
    logger.debug("Upper bound kept %d of %d candidates", kept, total)
    if not blocks:
        return np.zeros((0, 4), dtype=np.float64), np.zeros(0, dtype=np.float64)
    return np.concatenate(blocks), np.concatenate(bounds)


def nms_order(arr: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending score, then smaller area, then x, then y."""
    return np.lexsort((arr[:, 1], arr[:, 0], arr[:, 2] * arr[:, 3], -scores))


def nms_indices(arr: np.ndarray, scores: np.ndarray, beta: float, limit: Optional[int] = None) -> List[int]:
    """Indices kept by greedy suppression, in order; stops after `limit` keeps."""
    order = nms_order(arr, scores)
    keep: List[int] = []
    while order.size > 0 and (limit is None or len(keep) < limit):
        i = int(order[0])
        keep.append(i)
        overlap = iou_array(arr[i], arr[order[1:]])
        order = order[1:][overlap <= beta]
    return keep


def nms_boxes(scored: Sequence[ScoredBox], beta: float) -> List[ScoredBox]:
    """
    Greedy suppression: a box survives iff its IoU with every box already
    kept is at most beta. Output is in descending score order.
    """
    if not scored:
        return []
    arr = boxes_to_array([s.box for s in scored])
    scores = np.array([s.objectness for s in scored], dtype=np.float64)
    return [scored[i] for i in nms_indices(arr, scores, beta)]


def _suppressed_by(arr: np.ndarray, kept: np.ndarray, beta: float) -> np.ndarray:
    hit = np.zeros(len(arr), dtype=bool)
    for ref in kept:
        hit |= iou_array(ref, arr) > beta
    return hit


def _lazy_nms(arr: np.ndarray, bound: np.ndarray, es: EdgeStructures, cfg: ProposalConfig) -> Tuple[List[int], np.ndarray]:
    """
    Greedy suppression over exact scores, with candidates scored in blocks
    of descending upper bound. A kept box is final once its score exceeds
    every bound still unscored; scoring stops when `prerank_limit` final
    boxes exist. Unscored boxes overlapping a final box are dropped unscored.

    Returns the kept indices and the exact scores (-inf where unscored).
    """
    order = nms_order(arr, bound)
    scores = np.full(len(arr), -np.inf)
    limit = cfg.prerank_limit
    block = len(arr) if limit is None else max(cfg.score_chunk, 8 * limit)
    pos = 0
    final: List[int] = []
    while True:
        nxt = order[pos : pos + block]
        if final:
            nxt = nxt[~_suppressed_by(arr[nxt], arr[final], cfg.nms_beta)]
        # row-major chunks touch fewer groups
        nxt = nxt[np.lexsort((arr[nxt, 0], arr[nxt, 1]))]
        scores[nxt] = score_boxes(arr[nxt], es, cfg)
        pos += block
        block *= 2
        live = np.flatnonzero(scores >= cfg.objectness_floor)
        keep = [int(live[k]) for k in nms_indices(arr[live], scores[live], cfg.nms_beta, limit)]
        if pos >= len(order):
            logger.debug("Exactly scored %d of %d candidates", int(np.isfinite(scores).sum()), len(arr))
            return keep, scores
        ceiling = bound[order[pos]] + PRUNE_MARGIN
        final = []
        for i in keep:
            if scores[i] <= ceiling:
                break
            final.append(i)
        if limit is not None and len(final) >= limit:
            logger.debug("Exactly scored %d of %d candidates", int(np.isfinite(scores).sum()), len(arr))
            return final, scores


def propose(es: EdgeStructures, prev: BoundingBox, cfg: Optional[ProposalConfig] = None) -> List[ScoredBox]:
    """
    Thresholded, suppressed pool of whole-frame proposals near prev's size,
    truncated to the best `prerank_limit` by objectness when that is set.
    An empty list is a valid result.
    """
    cfg = cfg or ProposalConfig()
    if not es.group_count:
        return []
    arr, bound = _bounded_candidates(es, prev, cfg)
    if not len(arr):
        return []
    keep, scores = _lazy_nms(arr, bound, es, cfg)
    pool = [
        ScoredBox(box=BoundingBox(x=arr[i, 0], y=arr[i, 1], w=arr[i, 2], h=arr[i, 3]), objectness=float(scores[i]))
        for i in keep
    ]
    logger.debug("Proposal pool: %d boxes", len(pool))
    return pool


def sample_local(
    prev: BoundingBox,
    cfg: ProposalConfig,
    rng: np.random.Generator,
    frame_w: int,
    frame_h: int,
) -> List[BoundingBox]:
    """
    prev-sized boxes whose centres are uniform on the disc of the local
    radius around prev's centre, translated into the frame.
    """
    u = rng.random(cfg.local_count)
    v = rng.random(cfg.local_count)
    r = cfg.local_radius * np.sqrt(u)
    theta = 2.0 * math.pi * v
    cx, cy = prev.center
    xs = cx + r * np.cos(theta) - prev.w / 2.0
    ys = cy + r * np.sin(theta) - prev.h / 2.0
    return [
        BoundingBox(x=float(x), y=float(y), w=prev.w, h=prev.h).clamp_to(frame_w, frame_h)
        for x, y in zip(xs, ys)
    ]


def sample_dense(prev: BoundingBox, cfg: ProposalConfig, frame_w: int, frame_h: int) -> List[BoundingBox]:
    """
    Every prev-sized box whose centre offset lies on the dense lattice inside
    the local radius; duplicates after translation into the frame removed.
    """
    reach = int(math.floor(cfg.local_radius / cfg.dense_step))
    offsets = np.arange(-reach, reach + 1) * cfg.dense_step
    seen = set()
    boxes = []
    for dy in offsets:
        for dx in offsets:
            if dx * dx + dy * dy > cfg.local_radius * cfg.local_radius:
                continue
            b = BoundingBox(x=prev.x + float(dx), y=prev.y + float(dy), w=prev.w, h=prev.h).clamp_to(frame_w, frame_h)
            key = (b.x, b.y)
            if key not in seen:
                seen.add(key)
                boxes.append(b)
    return boxes


def write_proposals_csv(scored: Sequence[ScoredBox], path: Union[str, Path]) -> None:
    """x, y, w, h, objectness rows; a rerank column is added once any box carries a re-rank score."""
    path = Path(path)
    reranked = any(s.rerank_score is not None for s in scored)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["x", "y", "w", "h", "objectness"] + (["rerank"] if reranked else []))
        for s in scored:
            b = s.box
            row = [f"{b.x:g}", f"{b.y:g}", f"{b.w:g}", f"{b.h:g}", f"{s.objectness:.8f}"]
            if reranked:
                row.append(f"{s.rerank_score or 0.0:.8f}")
            writer.writerow(row)
