"""
Per-frame tracking loop: edges, proposals, re-ranking, candidate testing
and model updates, in that order, for one sequence.
"""
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..utils import RUNTIME_ERRORS, TrackingError, setup_logging, stage_timer
from .base import CoreTracker
from .config import CandidateSet, RunConfig
from .edgemap import EdgeStructures, build_edge_structures
from .imgio import BoundingBox, Image
from .objectness import ScoredBox, propose, sample_dense, sample_local
from .rerank import RerankModel, init_rerank, rerank_select, top_by_objectness, update_rerank

# Importing the core modules registers their tracker kinds.
from . import ncctracker, sstracker  # noqa: F401  pylint: disable=unused-import

logger = setup_logging(__name__)

STAGES = ("edges", "propose", "rerank", "track", "update", "rerank_update")


class FrameRecord(BaseModel):
    """What the loop produced on one frame."""

    model_config = ConfigDict(frozen=True)

    index: int
    estimate: BoundingBox
    score: float
    timings: Dict[str, float] = Field(default_factory=dict)
    pool_size: int = 0
    selected_size: int = 0
    test_size: int = 0
    fallback: bool = False
    proposals: Optional[List[BoundingBox]] = None


class ProposalTracker:
    """
    Tracks one sequence with whole-frame proposals feeding a core tracker.

    The run seed is split into two streams: one for the core model, one for
    local box sampling.
    """

    def __init__(self, cfg: RunConfig, keep_proposals: bool = False):
        self.cfg = cfg
        self.keep_proposals = keep_proposals
        core_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        self.core = CoreTracker.create(cfg, np.random.default_rng(core_seed))
        self.rng = np.random.default_rng(sample_seed)
        self.rerank: Optional[RerankModel] = None
        self.frame_index = 0

    @contextmanager
    def _stage(self, name: str, timings: Dict[str, float]) -> Iterator[None]:
        with stage_timer(name, timings):
            try:
                yield
            except TrackingError:
                raise
            except RUNTIME_ERRORS as exc:
                raise TrackingError(f"{exc.__class__.__name__}: {exc}", frame=self.frame_index, stage=name) from exc

    def _select(self, pool: Sequence[ScoredBox], es: EdgeStructures) -> List[ScoredBox]:
        if self.cfg.rerank_enabled and self.rerank is not None:
            return rerank_select(pool, self.rerank, es, self.cfg.max_proposals, self.cfg)
        return top_by_objectness(pool, self.cfg.max_proposals)

    def _local(self, around: BoundingBox, frame: Image) -> List[BoundingBox]:
        return sample_local(around, self.cfg, self.rng, frame.width, frame.height)

    def _test_set(self, selected: List[ScoredBox], prev: BoundingBox, frame: Image) -> List[ScoredBox]:
        kind: CandidateSet = self.cfg.test_set
        if kind == "E":
            return list(selected)
        if kind == "R":
            dense = sample_dense(prev, self.cfg, frame.width, frame.height)
            return [ScoredBox(box=b, objectness=0.0) for b in dense]
        local = [ScoredBox(box=b, objectness=0.0) for b in self._local(prev, frame)]
        return list(selected) + local

    def _update_set(self, estimate: BoundingBox, selected: Sequence[ScoredBox], frame: Image) -> List[BoundingBox]:
        kind: CandidateSet = self.cfg.update_set
        boxes: List[BoundingBox] = []
        if kind in ("E", "E+R"):
            boxes.extend(s.box for s in selected if s.box != estimate)
        if kind in ("R", "E+R"):
            boxes.extend(self._local(estimate, frame))
        return boxes

    def init(self, frame: Image, box: BoundingBox) -> FrameRecord:
        """Learns the object from the first frame's box."""
        self.frame_index = 0
        timings: Dict[str, float] = {}
        with self._stage("edges", timings):
            es = build_edge_structures(frame, self.cfg)
        with self._stage("propose", timings):
            pool = propose(es, box, self.cfg)
        with self._stage("rerank", timings):
            if self.cfg.rerank_enabled:
                self.rerank = init_rerank(box, pool, es, self.cfg, self.cfg, seed=self.cfg.seed)
            selected = self._select(pool, es)
        with self._stage("update", timings):
            self.core.init(frame, box, self._update_set(box, selected, frame))
        logger.info("Initialised %s tracker on %s, %d proposals", self.cfg.tracker, box.as_tuple(), len(pool))
        return FrameRecord(
            index=0,
            estimate=box,
            score=0.0,
            timings=timings,
            pool_size=len(pool),
            selected_size=len(selected),
            proposals=[s.box for s in selected] if self.keep_proposals else None,
        )

    def step(self, frame: Image) -> FrameRecord:
        """Estimates the object box on the next frame and adapts the models."""
        self.frame_index += 1
        prev = self.core.previous
        timings: Dict[str, float] = {}
        with self._stage("edges", timings):
            es = build_edge_structures(frame, self.cfg)
        with self._stage("propose", timings):
            pool = propose(es, prev, self.cfg)
        with self._stage("rerank", timings):
            selected = self._select(pool, es)
        with self._stage("track", timings):
            test = self._test_set(selected, prev, frame)
            estimate, score = self.core.track_step(frame, test, self.rng)
        with self._stage("update", timings):
            self.core.update(frame, estimate, self._update_set(estimate, selected, frame))
        with self._stage("rerank_update", timings):
            if self.cfg.rerank_enabled and self.rerank is not None:
                self.rerank = update_rerank(
                    self.rerank, self.frame_index, estimate, pool if self.cfg.rerank_update_pool == "objectness" else selected,
                    es, self.cfg, self.cfg, seed=self.cfg.seed,
                )
        return FrameRecord(
            index=self.frame_index,
            estimate=estimate,
            score=score,
            timings=timings,
            pool_size=len(pool),
            selected_size=len(selected),
            test_size=len(test),
            fallback=not test,
            proposals=[s.box for s in selected] if self.keep_proposals else None,
        )


def track_sequence(
    frames: Sequence[Image],
    init_box: BoundingBox,
    cfg: RunConfig,
    keep_proposals: bool = False,
    on_frame: Optional[Callable[[FrameRecord], None]] = None,
) -> List[FrameRecord]:
    """One pass over `frames`, initialised on the first, never re-initialised."""
    tracker = ProposalTracker(cfg, keep_proposals=keep_proposals)
    records = [tracker.init(frames[0], init_box)]
    if on_frame:
        on_frame(records[0])
    for frame in frames[1:]:
        record = tracker.step(frame)
        records.append(record)
        if on_frame:
            on_frame(record)
    return records
