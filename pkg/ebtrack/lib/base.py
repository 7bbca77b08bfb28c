"""Core tracker interface and the shared candidate decision rule."""
import math
from abc import ABC, abstractmethod
from typing import Any, ClassVar, Dict, Optional, Sequence, Tuple, Type

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..utils import ConfigError, setup_logging
from .config import RunConfig
from .imgio import BoundingBox, Image
from .objectness import ScoredBox, sample_local

logger = setup_logging(__name__)

MIN_INIT_SIZE = 4.0


def smoothness(b: BoundingBox, prev: BoundingBox, sigma: float, weight: float = 0.1) -> float:
    """weight * exp(-|c(b) - c(prev)|^2 / (2 sigma^2))."""
    (bx, by), (px, py) = b.center, prev.center
    d2 = (bx - px) ** 2 + (by - py) ** 2
    return weight * math.exp(-d2 / (2.0 * sigma * sigma))


def select_best(
    model_scores: Sequence[float],
    candidates: Sequence[ScoredBox],
    prev: BoundingBox,
    sigma: float,
    cfg: RunConfig,
) -> Tuple[int, float]:
    """
    Index and value of the best model score plus smoothness. Exact ties go to
    the higher smoothness, then the smaller area, then x, then y.
    """
    weight = cfg.smoothness_weight if cfg.use_smoothness else 0.0
    smooth = [smoothness(c.box, prev, sigma, weight) for c in candidates]
    totals = [float(f) + s for f, s in zip(model_scores, smooth)]
    best = min(
        range(len(candidates)),
        key=lambda i: (
            -totals[i],
            -smooth[i],
            candidates[i].box.area,
            candidates[i].box.x,
            candidates[i].box.y,
        ),
    )
    return best, totals[best]


class CoreTracker(BaseModel, ABC):
    """
    Appearance model behind the proposal pipeline. Subclasses declare a
    `kind` and are built by name through `CoreTracker.create`.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    registry: ClassVar[Dict[str, Type["CoreTracker"]]] = {}
    kind: ClassVar[str] = ""

    cfg: RunConfig
    rng: np.random.Generator
    sigma: float = 0.0
    previous: Optional[BoundingBox] = None
    frame_index: int = 0

    def __init_subclass__(cls, **kwargs: Any):
        super().__init_subclass__(**kwargs)
        kind = cls.__dict__.get("kind")
        if kind:
            CoreTracker.registry[kind] = cls

    @classmethod
    def create(cls, cfg: RunConfig, rng: Optional[np.random.Generator] = None) -> "CoreTracker":
        try:
            impl = cls.registry[cfg.tracker]
        except KeyError as exc:
            raise ConfigError(f"unknown tracker kind {cfg.tracker!r}") from exc
        return impl(cfg=cfg, rng=rng if rng is not None else np.random.default_rng(cfg.seed))

    def check_init_box(self, frame: Image, box: BoundingBox) -> None:
        if box.w < MIN_INIT_SIZE or box.h < MIN_INIT_SIZE:
            raise ConfigError(f"initial box {box.as_tuple()} is smaller than {MIN_INIT_SIZE:g} px")
        if not box.intersects_frame(frame.width, frame.height):
            raise ConfigError(f"initial box {box.as_tuple()} lies outside the frame")

    @abstractmethod
    def init(self, frame: Image, box: BoundingBox, negatives: Sequence[BoundingBox]) -> None:
        """Learns the appearance of `box` on the first frame."""

    @abstractmethod
    def model_scores(self, frame: Image, boxes: Sequence[BoundingBox]) -> np.ndarray:
        """Appearance score f of every box."""

    @abstractmethod
    def update(self, frame: Image, estimate: BoundingBox, negatives: Sequence[BoundingBox]) -> None:
        """Adapts the model to this frame's estimate."""

    def track_step(
        self, frame: Image, candidates: Sequence[ScoredBox], rng: Optional[np.random.Generator] = None
    ) -> Tuple[BoundingBox, float]:
        """
        Best candidate under model score plus smoothness. Without candidates
        the prev-sized local samples are tested instead.
        """
        if self.previous is None:
            raise RuntimeError("track_step called before init")
        self.frame_index += 1
        if not candidates:
            local = sample_local(self.previous, self.cfg, rng or self.rng, frame.width, frame.height)
            candidates = [ScoredBox(box=b, objectness=0.0) for b in local]
            logger.debug("Frame %d: empty candidate set, testing %d local samples", self.frame_index, len(local))
        scores = self.model_scores(frame, [c.box for c in candidates])
        best, total = select_best(scores, candidates, self.previous, self.sigma, self.cfg)
        estimate = candidates[best].box
        self.previous = estimate
        return estimate, total
