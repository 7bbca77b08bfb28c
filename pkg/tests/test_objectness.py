import csv
import heapq
from time import perf_counter

import numpy as np
import pytest

from ebtrack.lib.config import ProposalConfig
from ebtrack.lib.edgemap import build_edge_structures
from ebtrack.lib.evalharness import SynthSpec, synth_sequence
from ebtrack.lib.imgio import BoundingBox, Image, boxes_to_array, iou, iou_array
from ebtrack.lib.objectness import (
    ScoredBox,
    candidate_array,
    candidate_sizes,
    chain_decay,
    nms_boxes,
    nms_indices,
    propose,
    sample_dense,
    sample_local,
    score_box,
    score_boxes,
    write_proposals_csv,
)

from .conftest import square_image

ENCLOSING = BoundingBox(x=16, y=10, w=24, h=24)
STRADDLING = BoundingBox(x=28, y=10, w=24, h=24)


@pytest.fixture
def square_es(square):
    return build_edge_structures(square)


def test_enclosing_beats_straddling(square_es):
    enclosing = score_box(ENCLOSING, square_es)
    assert enclosing > 0.0
    assert enclosing > score_box(STRADDLING, square_es)


def test_degenerate_boxes_score_zero(square_es):
    assert score_box(BoundingBox(x=20, y=14, w=1, h=16), square_es) == 0.0
    assert score_box(BoundingBox(x=200, y=200, w=10, h=10), square_es) == 0.0


def test_blank_frame(blank):
    es = build_edge_structures(blank)
    assert score_box(ENCLOSING, es) == 0.0
    assert propose(es, ENCLOSING) == []


def test_batch_and_chunked_scores_are_identical(square_es):
    boxes = [BoundingBox(x=float(x), y=float(y), w=w, h=h) for x in range(10, 30, 3) for y in range(6, 20, 4) for w, h in ((20, 20), (24, 18))]
    batch = score_boxes(boxes, square_es)
    single = np.array([score_box(b, square_es) for b in boxes])
    chunked = score_boxes(boxes, square_es, ProposalConfig(score_chunk=3))
    assert np.array_equal(batch, single)
    assert np.array_equal(batch, chunked)
    assert np.all(batch >= 0.0)


def test_chain_decay_without_straddlers(square_es):
    interior = np.ones(square_es.group_count, dtype=bool)
    assert chain_decay(np.array([], dtype=np.int64), interior, square_es, 0.05) == 0.0


def _best_first_decay(straddlers, interior, es, floor):
    neighbours = {}
    for (i, j), a in es.affinity.items():
        neighbours.setdefault(i, []).append((j, a))
    best = {}
    heap = []

    def relax(source, strength):
        for j, a in neighbours.get(source, []):
            p = strength * a
            if interior[j] and p >= floor and p > best.get(j, 0.0):
                best[j] = p
                heapq.heappush(heap, (-p, j))

    for s in straddlers:
        relax(int(s), 1.0)
    while heap:
        neg, j = heapq.heappop(heap)
        if -neg >= best[j]:
            relax(j, -neg)
    return sum(best[j] * es.group_mass[j] for j in best)


def _group_masks(es, box):
    x0, y0, x1, y1 = int(box.x), int(box.y), int(box.x + box.w), int(box.y + box.h)
    gb = es.group_bounds
    inside = (gb[:, 0] >= x0) & (gb[:, 2] < x1) & (gb[:, 1] >= y0) & (gb[:, 3] < y1)
    overlap = (gb[:, 0] < x1) & (gb[:, 2] >= x0) & (gb[:, 1] < y1) & (gb[:, 3] >= y0)
    return np.flatnonzero(overlap & ~inside), inside


def test_chain_decay_matches_best_first_search(tiny_sequence):
    es = build_edge_structures(tiny_sequence.frames[0])
    assert es.adjacency.nnz
    rng = np.random.default_rng(9)
    checked = 0
    for _ in range(60):
        w, h = (int(v) for v in rng.integers(10, 48, size=2))
        box = BoundingBox(x=int(rng.integers(0, 96 - w)), y=int(rng.integers(0, 72 - h)), w=w, h=h)
        straddlers, interior = _group_masks(es, box)
        expected = _best_first_decay(straddlers, interior, es, 0.05)
        checked += expected > 0
        assert chain_decay(straddlers, interior, es, 0.05) == pytest.approx(expected, rel=1e-12, abs=1e-12)
    assert checked > 0


def test_scaled_magnitudes_keep_the_ranking(tiny_sequence):
    es = build_edge_structures(tiny_sequence.frames[0])
    prev = tiny_sequence.gt[0]
    arr = candidate_array(prev, es.width, es.height)
    base = score_boxes(arr, es)
    order = np.lexsort((np.arange(len(arr)), -base))
    for lam in (0.25, 2.0, 8.0):
        scaled = es.model_copy(
            update={"magnitude": es.magnitude * lam, "group_mass": es.group_mass * lam, "integral": es.integral * lam}
        )
        scores = score_boxes(arr, scaled)
        assert np.allclose(scores, lam * base, rtol=1e-12, atol=1e-15)
        assert np.array_equal(np.lexsort((np.arange(len(arr)), -scores)), order)


def test_candidate_sizes_respect_area_bounds():
    cfg = ProposalConfig()
    prev = BoundingBox(x=0, y=0, w=20, h=20)
    sizes = candidate_sizes(prev, 320, 240, cfg)
    assert (20, 20) in sizes
    assert all(cfg.area_min * 400 <= w * h <= cfg.area_max * 400 for w, h in sizes)
    assert candidate_sizes(BoundingBox(x=0, y=0, w=300, h=300), 64, 48, cfg) == []


def test_candidates_lie_inside_the_frame():
    arr = candidate_array(BoundingBox(x=0, y=0, w=16, h=16), 64, 48)
    assert len(arr)
    assert np.all(arr[:, 0] >= 0) and np.all(arr[:, 1] >= 0)
    assert np.all(arr[:, 0] + arr[:, 2] <= 64) and np.all(arr[:, 1] + arr[:, 3] <= 48)


def test_nms_keeps_boxes_under_the_overlap_threshold():
    scored = [
        ScoredBox(box=BoundingBox(x=0, y=0, w=10, h=10), objectness=0.9),
        ScoredBox(box=BoundingBox(x=1, y=0, w=10, h=10), objectness=0.8),
        ScoredBox(box=BoundingBox(x=2, y=0, w=10, h=10), objectness=0.7),
    ]
    kept = nms_boxes(scored, 0.8)
    assert [s.objectness for s in kept] == [0.9, 0.7]
    assert nms_boxes([], 0.8) == []


def test_nms_breaks_ties_by_area_then_position():
    arr = np.array([[5, 0, 10, 10], [0, 0, 12, 12], [0, 0, 10, 10]], dtype=np.float64)
    assert nms_indices(arr, np.array([0.5, 0.5, 0.5]), 0.99) == [2, 0, 1]


def test_propose_matches_exhaustive_scoring(square_es):
    cfg = ProposalConfig(prerank_limit=None)
    prev = BoundingBox(x=19, y=13, w=18, h=18)
    arr = candidate_array(prev, square_es.width, square_es.height, cfg)
    scores = score_boxes(arr, square_es, cfg)
    keep = scores >= cfg.objectness_floor
    arr, scores = arr[keep], scores[keep]
    expected = [tuple(arr[i]) for i in nms_indices(arr, scores, cfg.nms_beta)]
    pool = propose(square_es, prev, cfg)
    assert [s.box.as_tuple() for s in pool] == expected
    assert [s.objectness for s in pool] == sorted((s.objectness for s in pool), reverse=True)


def test_proposals_are_thresholded_and_suppressed(square_es):
    cfg = ProposalConfig()
    pool = propose(square_es, BoundingBox(x=19, y=13, w=18, h=18), cfg)
    assert pool
    assert all(s.objectness >= cfg.objectness_floor for s in pool)
    arr = boxes_to_array([s.box for s in pool])
    for i in range(len(arr)):
        assert np.all(iou_array(arr[i], np.delete(arr, i, axis=0)) <= cfg.nms_beta)
    assert iou(pool[0].box, BoundingBox(x=20, y=14, w=16, h=16)) >= 0.5


def test_prerank_limit(square_es):
    prev = BoundingBox(x=19, y=13, w=18, h=18)
    full = propose(square_es, prev, ProposalConfig(prerank_limit=None))
    limited = propose(square_es, prev, ProposalConfig(prerank_limit=2))
    assert limited == full[:2]


def test_local_samples():
    prev = BoundingBox(x=140, y=100, w=40, h=30)
    cfg = ProposalConfig(local_count=50)
    boxes = sample_local(prev, cfg, np.random.default_rng(1), 320, 240)
    again = sample_local(prev, cfg, np.random.default_rng(1), 320, 240)
    assert boxes == again
    assert len(boxes) == 50
    cx, cy = prev.center
    for b in boxes:
        assert (b.w, b.h) == (40, 30)
        assert (b.center[0] - cx) ** 2 + (b.center[1] - cy) ** 2 <= 30.0**2 + 1e-9


def test_local_samples_stay_in_frame():
    prev = BoundingBox(x=0, y=0, w=20, h=20)
    for b in sample_local(prev, ProposalConfig(), np.random.default_rng(0), 64, 48):
        assert 0 <= b.x <= 44 and 0 <= b.y <= 28


def test_dense_samples():
    prev = BoundingBox(x=100, y=100, w=20, h=20)
    cfg = ProposalConfig(local_radius=4.0, dense_step=2.0)
    boxes = sample_dense(prev, cfg, 320, 240)
    assert prev in boxes
    assert len(boxes) == len({b.as_tuple() for b in boxes}) == 13


def test_proposals_csv(tmp_path):
    scored = [ScoredBox(box=BoundingBox(x=1, y=2, w=3, h=4), objectness=0.5)]
    write_proposals_csv(scored, tmp_path / "a.csv")
    rows = list(csv.reader((tmp_path / "a.csv").open()))
    assert rows == [["x", "y", "w", "h", "objectness"], ["1", "2", "3", "4", "0.50000000"]]
    write_proposals_csv([scored[0].model_copy(update={"rerank_score": -1.25})], tmp_path / "b.csv")
    rows = list(csv.reader((tmp_path / "b.csv").open()))
    assert rows[0][-1] == "rerank" and rows[1][-1] == "-1.25000000"
    write_proposals_csv([], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().strip() == "x,y,w,h,objectness"


def _random_rectangle(rng):
    tw, th = (int(v) for v in rng.integers(12, 19, size=2))
    x0 = int(rng.integers(3, 32 - tw - 2))
    y0 = int(rng.integers(3, 32 - th - 2))
    outside = int(rng.integers(0, 80))
    inside = outside + int(rng.integers(80, 176))
    return square_image(32, 32, (x0, y0, tw, th), inside=inside, outside=outside), BoundingBox(x=x0, y=y0, w=tw, h=th)


@pytest.mark.slow
def test_top_box_fits_a_single_contour():
    rng = np.random.default_rng(2024)
    hits = 0
    cfg = ProposalConfig(score_chunk=4096)
    arr = np.array(
        [(x, y, w, h) for w in range(2, 33) for h in range(2, 33) for x in range(0, 33 - w) for y in range(0, 33 - h)],
        dtype=np.float64,
    )
    for _ in range(100):
        img, tight = _random_rectangle(rng)
        es = build_edge_structures(img)
        scores = score_boxes(arr, es, cfg)
        best = arr[int(np.argmax(scores))]
        if iou(BoundingBox.from_xywh(best), tight) >= 0.7:
            hits += 1
    assert hits >= 95


@pytest.mark.slow
def test_enclosure_beats_straddling_on_random_contours():
    rng = np.random.default_rng(7)
    for _ in range(100):
        img, tight = _random_rectangle(rng)
        es = build_edge_structures(img)
        enclosing = BoundingBox(x=tight.x - 2, y=tight.y - 2, w=tight.w + 4, h=tight.h + 4)
        straddling = BoundingBox(x=enclosing.x + tight.w / 2, y=enclosing.y, w=enclosing.w, h=enclosing.h)
        assert score_box(enclosing, es) > score_box(straddling, es)


@pytest.mark.parametrize("limit", [1, 5, 20])
def test_capped_pool_is_a_prefix_of_the_full_pool(tiny_sequence, limit):
    es = build_edge_structures(tiny_sequence.frames[0])
    prev = tiny_sequence.gt[0]
    full = propose(es, prev, ProposalConfig(prerank_limit=None))
    capped = propose(es, prev, ProposalConfig(prerank_limit=limit, score_chunk=16))
    assert len(full) > limit
    assert capped == full[:limit]


@pytest.mark.slow
def test_propose_on_a_vga_frame_is_fast():
    seq = synth_sequence(SynthSpec(name="vga", width=640, height=480, frames=1, seed=21, distractors=30))
    es = build_edge_structures(seq.frames[0])
    start = perf_counter()
    pool = propose(es, seq.gt[0])
    elapsed = perf_counter() - start
    assert pool
    assert len(pool) <= ProposalConfig().prerank_limit
    assert elapsed < 1.0
