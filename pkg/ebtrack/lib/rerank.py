"""
Instance-specific re-ranking of the proposal pool.

Each proposal is described by the objectness of ten Haar-like sub-boxes
and scored by an online linear SVM trained with Pegasos on the current
estimate against proposals that miss it.
"""
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from ..utils import DataError, setup_logging
from .config import ProposalConfig, RerankConfig
from .edgemap import EdgeStructures
from .imgio import BoundingBox, boxes_to_array, iou_array
from .objectness import ScoredBox, score_boxes

logger = setup_logging(__name__)

FEATURE_DIM = 10
MODEL_VERSION = 1


def partition_array(arr: np.ndarray) -> np.ndarray:
    """
    (n, 4) boxes to (n, 10, 4) sub-boxes: full, left, right, top, bottom,
    the four quadrants (TL, TR, BL, BR) and the centred half box.
    """
    x, y, w, h = (arr[:, k] for k in range(4))
    hw, hh = w / 2.0, h / 2.0
    cells = [
        (x, y, w, h),
        (x, y, hw, h),
        (x + hw, y, hw, h),
        (x, y, w, hh),
        (x, y + hh, w, hh),
        (x, y, hw, hh),
        (x + hw, y, hw, hh),
        (x, y + hh, hw, hh),
        (x + hw, y + hh, hw, hh),
        (x + w / 4.0, y + h / 4.0, hw, hh),
    ]
    return np.stack([np.stack(c, axis=1) for c in cells], axis=1)


def partition_box(b: BoundingBox) -> List[BoundingBox]:
    parts = partition_array(np.array([b.as_tuple()], dtype=np.float64))[0]
    return [BoundingBox(x=float(p[0]), y=float(p[1]), w=float(p[2]), h=float(p[3])) for p in parts]


def rerank_features(
    boxes: Sequence[BoundingBox],
    es: EdgeStructures,
    cfg: Optional[ProposalConfig] = None,
    full_scores: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """
    (n, 10) objectness of every sub-box; component 0 is the full box.
    `full_scores`, when given, is taken as component 0 instead of rescoring.
    """
    arr = boxes_to_array(list(boxes))
    if not len(arr):
        return np.zeros((0, FEATURE_DIM), dtype=np.float64)
    parts = partition_array(arr)
    if full_scores is None:
        return score_boxes(parts.reshape(-1, 4), es, cfg).reshape(len(arr), FEATURE_DIM)
    features = np.empty((len(arr), FEATURE_DIM), dtype=np.float64)
    features[:, 0] = np.asarray(full_scores, dtype=np.float64)
    features[:, 1:] = score_boxes(parts[:, 1:].reshape(-1, 4), es, cfg).reshape(len(arr), FEATURE_DIM - 1)
    return features


def rerank_feature(b: BoundingBox, es: EdgeStructures, cfg: Optional[ProposalConfig] = None) -> np.ndarray:
    return rerank_features([b], es, cfg)[0]


class RerankModel(BaseModel):
    """
    Linear scorer w . f + b over the 10-D sub-box objectness feature.
    """

    model_config = ConfigDict(frozen=True)

    version: int = MODEL_VERSION
    layout: str = "haar10-v1"
    weights: Tuple[float, ...] = (0.0,) * FEATURE_DIM
    bias: float = 0.0
    step: int = Field(default=0, ge=0)
    lam: float = Field(default=1e-3, gt=0.0)
    center: Optional[Tuple[float, ...]] = None
    scale: Optional[Tuple[float, ...]] = None
    trace: Tuple[float, ...] = Field(default=(), exclude=True)

    @field_validator("weights")
    @classmethod
    def _ten_weights(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(value) != FEATURE_DIM:
            raise ValueError(f"expected {FEATURE_DIM} weights, got {len(value)}")
        return value

    def transform(self, features: np.ndarray) -> np.ndarray:
        if self.center is None or self.scale is None:
            return features
        return (features - np.asarray(self.center)) / np.asarray(self.scale)

    def score(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64).reshape(-1, FEATURE_DIM)
        return self.transform(features) @ np.asarray(self.weights) + self.bias

    def to_text(self) -> str:
        return self.model_dump_json()

    @classmethod
    def from_text(cls, text: str) -> "RerankModel":
        try:
            model = cls.model_validate_json(text)
        except ValidationError as exc:
            raise DataError(f"invalid re-ranker record: {exc}") from exc
        if model.version != MODEL_VERSION:
            raise DataError(f"unsupported re-ranker record version {model.version}")
        return model


def objective(w: np.ndarray, X: np.ndarray, y: np.ndarray, c: np.ndarray, lam: float) -> float:
    """lam/2 |w|^2 plus the class-weighted mean hinge loss; X carries the bias column."""
    hinge = np.maximum(0.0, 1.0 - y * (X @ w))
    return float(0.5 * lam * (w @ w) + (c * hinge).sum() / len(y))


def pegasos(
    w: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    epochs: int,
    step: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, int, List[float]]:
    """
    Stochastic subgradient epochs over (X, y) from `w`, projected onto the
    1/sqrt(lam) ball. Classes are weighted to balance. The best iterate seen
    at an epoch boundary is kept, so the returned trace never increases.
    """
    n = len(y)
    n_pos = int((y > 0).sum())
    c = np.where(y > 0, n / (2.0 * max(n_pos, 1)), n / (2.0 * max(n - n_pos, 1)))
    radius = 1.0 / math.sqrt(lam)
    best_w, best_j = w.copy(), objective(w, X, y, c, lam)
    trace = [best_j]
    current = w.copy()
    for _ in range(epochs):
        for i in rng.permutation(n):
            step += 1
            eta = 1.0 / (lam * step)
            margin = y[i] * (X[i] @ current)
            current *= 1.0 - eta * lam
            if margin < 1.0:
                current += eta * c[i] * y[i] * X[i]
            norm = float(np.sqrt(current @ current))
            if norm > radius:
                current *= radius / norm
        j = objective(current, X, y, c, lam)
        if j < best_j:
            best_w, best_j = current.copy(), j
        trace.append(best_j)
    return best_w, step, trace


def training_set(
    estimate: BoundingBox, pool: Sequence[ScoredBox], es: EdgeStructures, cfg: RerankConfig, proposal_cfg: ProposalConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """The estimate as the single positive, pool boxes missing it as negatives."""
    boxes = [s.box for s in pool]
    if boxes:
        overlap = iou_array(estimate.as_tuple(), boxes_to_array(boxes))
        negatives = [s for s, o in zip(pool, overlap) if o < cfg.rerank_neg_overlap]
    else:
        negatives = []
    features = np.vstack(
        [
            rerank_features([estimate], es, proposal_cfg),
            rerank_features([s.box for s in negatives], es, proposal_cfg, [s.objectness for s in negatives]),
        ]
    )
    labels = np.concatenate([[1.0], -np.ones(len(negatives))])
    return features, labels


def _fit(
    model: RerankModel, features: np.ndarray, labels: np.ndarray, epochs: int, seed: int
) -> RerankModel:
    X = model.transform(features)
    X = np.hstack([X, np.ones((len(X), 1))])
    w0 = np.append(np.asarray(model.weights, dtype=np.float64), model.bias)
    rng = np.random.default_rng(seed)
    w, step, trace = pegasos(w0, X, labels, model.lam, epochs, model.step, rng)
    return model.model_copy(
        update={"weights": tuple(float(v) for v in w[:FEATURE_DIM]), "bias": float(w[FEATURE_DIM]), "step": step, "trace": tuple(trace)}
    )


def init_rerank(
    first: BoundingBox,
    pool: Sequence[ScoredBox],
    es: EdgeStructures,
    cfg: Optional[RerankConfig] = None,
    proposal_cfg: Optional[ProposalConfig] = None,
    seed: int = 0,
) -> RerankModel:
    """
    Trains the re-ranker on the first frame: the given box against the top
    objectness proposals that overlap it by less than the negative threshold.
    """
    cfg = cfg or RerankConfig()
    proposal_cfg = proposal_cfg or ProposalConfig()
    model = RerankModel(lam=cfg.rerank_lambda)
    ranked = sorted(pool, key=lambda s: -s.objectness)[: cfg.rerank_pool_size]
    features, labels = training_set(first, ranked, es, cfg, proposal_cfg)
    if len(labels) < 2:
        logger.info("Re-ranker init: no negatives, model stays zero")
        return model
    if cfg.rerank_standardize:
        scale = features.std(axis=0)
        model = model.model_copy(
            update={
                "center": tuple(float(v) for v in features.mean(axis=0)),
                "scale": tuple(float(v) if v > 0 else 1.0 for v in scale),
            }
        )
    model = _fit(model, features, labels, cfg.rerank_init_epochs, seed)
    logger.debug("Re-ranker init on %d negatives, objective %.6f -> %.6f", len(labels) - 1, model.trace[0], model.trace[-1])
    return model


def update_rerank(
    model: RerankModel,
    frame_index: int,
    estimate: BoundingBox,
    pool: Sequence[ScoredBox],
    es: EdgeStructures,
    cfg: Optional[RerankConfig] = None,
    proposal_cfg: Optional[ProposalConfig] = None,
    seed: int = 0,
) -> RerankModel:
    """
    Warm-started Pegasos epochs on the current estimate, run only on frames
    whose 0-based index is a multiple of the update period. Otherwise the
    model is returned as is.
    """
    cfg = cfg or RerankConfig()
    proposal_cfg = proposal_cfg or ProposalConfig()
    if frame_index % cfg.rerank_update_period != 0:
        return model
    if cfg.rerank_update_pool == "objectness":
        ranked = sorted(pool, key=lambda s: -s.objectness)[: cfg.rerank_pool_size]
    else:
        ranked = list(pool)[: cfg.rerank_pool_size]
    features, labels = training_set(estimate, ranked, es, cfg, proposal_cfg)
    if len(labels) < 2:
        return model
    return _fit(model, features, labels, cfg.rerank_update_epochs, seed + frame_index)


def rerank_order(scored: Sequence[ScoredBox]) -> List[int]:
    """Descending re-rank score, then objectness, then smaller area, x, y."""
    return sorted(
        range(len(scored)),
        key=lambda i: (
            -(scored[i].rerank_score or 0.0),
            -scored[i].objectness,
            scored[i].box.area,
            scored[i].box.x,
            scored[i].box.y,
        ),
    )


def rerank_select(
    pool: Sequence[ScoredBox],
    model: RerankModel,
    es: EdgeStructures,
    top: int,
    proposal_cfg: Optional[ProposalConfig] = None,
) -> List[ScoredBox]:
    """
    The `top` pool boxes by re-ranker score, each carrying that score.
    """
    if not pool:
        return []
    features = rerank_features([s.box for s in pool], es, proposal_cfg, [s.objectness for s in pool])
    scores = model.score(features)
    scored = [s.model_copy(update={"rerank_score": float(v)}) for s, v in zip(pool, scores)]
    return [scored[i] for i in rerank_order(scored)[:top]]


def top_by_objectness(pool: Sequence[ScoredBox], top: int) -> List[ScoredBox]:
    """Proposal selection with the re-ranker switched off."""
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].objectness, pool[i].box.area, pool[i].box.x, pool[i].box.y))
    return [pool[i] for i in order[:top]]
