"""
Structured-SVM core tracker.

Candidates are described by spatial-pyramid intensity histograms compared
with the intersection kernel. The model is a budgeted structured SVM
trained online with LaRank-style SMO steps: each frame adds a pattern made
of the estimate (positive) and the update candidates, whose loss is
1 - IoU with the estimate.
"""
import json
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ..utils import DataError, setup_logging
from .base import CoreTracker, select_best, smoothness
from .config import RunConfig, TrackerConfig
from .imgio import BoundingBox, Image, boxes_to_array, iou_array, sample_indices, to_grayscale

logger = setup_logging(__name__)

__all__ = [
    "EbtTracker",
    "StructuredSvm",
    "SupportPattern",
    "SupportVector",
    "checkpoint",
    "evaluate",
    "extract_feature",
    "extract_features",
    "feature_dim",
    "intersection_kernel",
    "kernel_matrix",
    "restore",
    "select_best",
    "smoothness",
]

CHECKPOINT_VERSION = 1
MIN_KII = 1e-12
ZERO_COEF = 1e-8
MIN_GAIN = 1e-5


def _position(items: list, obj: object) -> int:
    """Index of `obj` by identity, -1 if absent."""
    return next((i for i, item in enumerate(items) if item is obj), -1)


def _drop(items: list, obj: object) -> None:
    index = _position(items, obj)
    if index >= 0:
        del items[index]


def feature_dim(cfg: Optional[TrackerConfig] = None) -> int:
    cfg = cfg or TrackerConfig()
    channels = 3 if cfg.feature_channels == "rgb" else 1
    cells = sum(level * level for level in range(1, cfg.pyramid_levels + 1))
    return cells * channels * cfg.histogram_bins


def _patches(img: Image, boxes: Sequence[BoundingBox], cfg: TrackerConfig) -> np.ndarray:
    """(n, P, P, C) canonical patches in the configured channels."""
    size = cfg.patch_size
    source = img
    if cfg.feature_channels == "gray":
        source = to_grayscale(img)
    out = np.empty((len(boxes), size, size, source.channels), dtype=np.uint8)
    for k, b in enumerate(boxes):
        rows, cols = sample_indices(source, b, size, size)
        out[k] = source.pixels[rows[:, None], cols[None, :]]
    if cfg.feature_channels == "rgb" and source.channels == 1:
        out = np.repeat(out, 3, axis=3)
    return out


def extract_features(img: Image, boxes: Sequence[BoundingBox], cfg: Optional[TrackerConfig] = None) -> np.ndarray:
    """
    Spatial-pyramid histograms of every box, (n, D) float64.

    Blocks are ordered by level, cell (row-major), channel, bin; each block
    is L1-normalised over its cell.
    """
    cfg = cfg or TrackerConfig()
    n = len(boxes)
    dim = feature_dim(cfg)
    if not n:
        return np.zeros((0, dim), dtype=np.float64)
    patches = _patches(img, boxes, cfg)
    size, channels, bins = cfg.patch_size, patches.shape[3], cfg.histogram_bins
    quantised = (patches.astype(np.int64) * bins) // 256
    pixel = np.arange(size)
    offsets = (np.arange(n) * dim)[:, None, None, None]
    chan = np.arange(channels)[None, None, None, :]
    features = np.zeros(n * dim, dtype=np.float64)
    base = 0
    for level in range(1, cfg.pyramid_levels + 1):
        cell_of = (pixel * level) // size
        cell = (cell_of[:, None] * level + cell_of[None, :])[None, :, :, None]
        index = offsets + base + (cell * channels + chan) * bins + quantised
        features += np.bincount(index.ravel(), minlength=n * dim)
        base += level * level * channels * bins
    features = features.reshape(n, -1, bins)
    totals = features.sum(axis=2, keepdims=True)
    features = np.divide(features, totals, out=np.zeros_like(features), where=totals > 0)
    return features.reshape(n, dim)


def extract_feature(img: Image, b: BoundingBox, cfg: Optional[TrackerConfig] = None) -> np.ndarray:
    return extract_features(img, [b], cfg)[0]


def intersection_kernel(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    return float(np.minimum(a, b).sum(dtype=np.float64))


def kernel_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Intersection kernel between every row of `a` and every row of `b`."""
    out = np.empty((len(a), len(b)), dtype=np.float64)
    if len(b) <= len(a):
        for j in range(len(b)):
            out[:, j] = np.minimum(a, b[j]).sum(axis=1, dtype=np.float64)
    else:
        for i in range(len(a)):
            out[i, :] = np.minimum(b, a[i]).sum(axis=1, dtype=np.float64)
    return out


class SupportPattern(BaseModel):
    """One frame's training pattern: index 0 is the positive box."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: int
    boxes: np.ndarray  # (n, 4)
    features: np.ndarray  # (n, D) float32
    loss: np.ndarray  # (n,) 1 - IoU with the positive
    refs: int = 0

    positive: int = 0


class SupportVector(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    pattern: SupportPattern
    y: int
    b: float = 0.0
    g: float = 0.0

    @property
    def feature(self) -> np.ndarray:
        return self.pattern.features[self.y]

    @property
    def is_positive(self) -> bool:
        return self.y == self.pattern.positive


class StructuredSvm(BaseModel):
    """
    Budgeted online structured SVM over intersection-kernel features.

    Per pattern the coefficients sum to zero, the positive coefficient lies
    in [0, C] and all others are <= 0. `audit` records the dual objective
    before and after every SMO step.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    c: float = 100.0
    budget: int = 100
    reprocess: int = 10
    optimize_steps: int = 10
    rng: np.random.Generator = Field(default_factory=lambda: np.random.default_rng(0))
    patterns: List[SupportPattern] = Field(default_factory=list)
    svs: List[SupportVector] = Field(default_factory=list)
    kernel: np.ndarray = Field(default_factory=lambda: np.zeros((0, 0)))
    audit: Optional[List[Tuple[float, float]]] = None

    @classmethod
    def from_config(cls, cfg: TrackerConfig, rng: np.random.Generator) -> "StructuredSvm":
        return cls(
            c=cfg.svm_c,
            budget=cfg.svm_budget,
            reprocess=cfg.svm_reprocess,
            optimize_steps=cfg.svm_optimize_steps,
            rng=rng,
        )

    def sv_features(self) -> np.ndarray:
        if not self.svs:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([sv.feature for sv in self.svs])

    def coefficients(self) -> np.ndarray:
        return np.array([sv.b for sv in self.svs], dtype=np.float64)

    def evaluate_many(self, features: np.ndarray) -> np.ndarray:
        if not self.svs or not len(features):
            return np.zeros(len(features), dtype=np.float64)
        return kernel_matrix(features, self.sv_features()) @ self.coefficients()

    def dual_objective(self) -> float:
        """-sum b_i loss_i - 1/2 b^T K b over the support set."""
        if not self.svs:
            return 0.0
        beta = self.coefficients()
        loss = np.array([sv.pattern.loss[sv.y] for sv in self.svs])
        return float(-(beta @ loss) - 0.5 * beta @ self.kernel @ beta)

    def _add_sv(self, pattern: SupportPattern, y: int, g: float) -> int:
        sv = SupportVector(pattern=pattern, y=y, g=g)
        feature = pattern.features[y][None, :]
        row = kernel_matrix(feature, self.sv_features())[0] if self.svs else np.zeros(0)
        kii = kernel_matrix(feature, feature)[0, 0]
        n = len(self.svs)
        grown = np.empty((n + 1, n + 1), dtype=np.float64)
        grown[:n, :n] = self.kernel
        grown[n, :n] = row
        grown[:n, n] = row
        grown[n, n] = kii
        self.kernel = grown
        self.svs.append(sv)
        pattern.refs += 1
        return n

    def _remove_sv(self, index: int) -> None:
        sv = self.svs.pop(index)
        self.kernel = np.delete(np.delete(self.kernel, index, axis=0), index, axis=1)
        sv.pattern.refs -= 1
        if sv.pattern.refs == 0:
            _drop(self.patterns, sv.pattern)

    def _pattern_svs(self, pattern: SupportPattern) -> List[int]:
        return [i for i, sv in enumerate(self.svs) if sv.pattern is pattern]

    def _positive_index(self, pattern: SupportPattern) -> int:
        for i, sv in enumerate(self.svs):
            if sv.pattern is pattern and sv.is_positive:
                return i
        return -1

    def _min_gradient(self, pattern: SupportPattern) -> Tuple[int, float]:
        grads = -pattern.loss - self.evaluate_many(pattern.features)
        y = int(np.argmin(grads))
        return y, float(grads[y])

    def _max_gradient(self, pattern: SupportPattern) -> int:
        best, best_g = -1, -np.inf
        for i in self._pattern_svs(pattern):
            sv = self.svs[i]
            bound = self.c if sv.is_positive else 0.0
            if sv.g > best_g and sv.b < bound:
                best, best_g = i, sv.g
        return best

    def _discard(self, index: int) -> None:
        """
        Removes a vanishing coefficient, folding its residue into the pattern's
        positive. A vanishing positive takes the pattern's negatives with it:
        they sum to minus its coefficient, so each is within ZERO_COEF of zero.
        """
        sv = self.svs[index]
        if sv.is_positive:
            for i in sorted(self._pattern_svs(sv.pattern), reverse=True):
                self._remove_sv(i)
            self._recompute_gradients()
            return
        if sv.b != 0.0:
            target = self._positive_index(sv.pattern)
            if target >= 0:
                self._shift(target, index, sv.b)
        self._remove_sv(index)

    def _shift(self, ip: int, iN: int, amount: float) -> None:
        """Moves `amount` of coefficient from svs[iN] to svs[ip] and updates gradients."""
        self.svs[ip].b += amount
        self.svs[iN].b -= amount
        delta = amount * (self.kernel[:, ip] - self.kernel[:, iN])
        for k, sv in enumerate(self.svs):
            sv.g -= float(delta[k])

    def smo_step(self, ip: int, iN: int) -> None:
        if ip == iN:
            return
        sp, sn = self.svs[ip], self.svs[iN]
        before = self.dual_objective() if self.audit is not None else 0.0
        if sp.g - sn.g >= MIN_GAIN:
            kii = self.kernel[ip, ip] + self.kernel[iN, iN] - 2.0 * self.kernel[ip, iN]
            if kii > MIN_KII:
                bound = self.c if sp.is_positive else 0.0
                step = min((sp.g - sn.g) / kii, bound - sp.b)
                self._shift(ip, iN, step)
        if self.audit is not None:
            self.audit.append((before, self.dual_objective()))
        if abs(sp.b) < ZERO_COEF:
            self._discard(ip)
            iN = _position(self.svs, sn)
        if iN >= 0 and abs(sn.b) < ZERO_COEF:
            self._discard(iN)

    def process_new(self, pattern: SupportPattern) -> None:
        positive = pattern.positive
        g_pos = -float(self.evaluate_many(pattern.features[positive : positive + 1])[0])
        ip = self._add_sv(pattern, positive, g_pos)
        y, g = self._min_gradient(pattern)
        if y == positive:
            self._discard(ip)
            return
        iN = self._add_sv(pattern, y, g)
        self.smo_step(ip, iN)

    def process_old(self) -> None:
        if not self.patterns:
            return
        pattern = self.patterns[int(self.rng.integers(len(self.patterns)))]
        ip = self._max_gradient(pattern)
        if ip < 0:
            return
        y, g = self._min_gradient(pattern)
        iN = next((i for i in self._pattern_svs(pattern) if self.svs[i].y == y), -1)
        if iN < 0:
            iN = self._add_sv(pattern, y, g)
        self.smo_step(ip, iN)

    def optimize(self) -> None:
        if not self.patterns:
            return
        pattern = self.patterns[int(self.rng.integers(len(self.patterns)))]
        members = self._pattern_svs(pattern)
        ip = self._max_gradient(pattern)
        if ip < 0 or not members:
            return
        iN = min(members, key=lambda i: self.svs[i].g)
        self.smo_step(ip, iN)

    def _recompute_gradients(self) -> None:
        if not self.svs:
            return
        f = self.kernel @ self.coefficients()
        for k, sv in enumerate(self.svs):
            sv.g = float(-sv.pattern.loss[sv.y] - f[k])

    def maintain_budget(self) -> None:
        """
        Evicts negative support vectors while over budget, each time the one
        whose removal changes the weight vector least; its coefficient is
        merged into the pattern's positive.
        """
        while len(self.svs) > self.budget:
            best, best_val, best_pos = -1, np.inf, -1
            for i, sv in enumerate(self.svs):
                if sv.b >= 0.0:
                    continue
                j = self._positive_index(sv.pattern)
                if j < 0:
                    continue
                val = sv.b * sv.b * (self.kernel[i, i] + self.kernel[j, j] - 2.0 * self.kernel[i, j])
                if val < best_val:
                    best, best_val, best_pos = i, val, j
            if best < 0:
                break
            positive = self.svs[best_pos]
            positive.b += self.svs[best].b
            self._remove_sv(best)
            if positive.b < ZERO_COEF:
                self._discard(_position(self.svs, positive))
            self._recompute_gradients()

    def add_pattern(self, pattern: SupportPattern) -> None:
        self.patterns.append(pattern)
        self.process_new(pattern)
        if pattern.refs == 0:
            _drop(self.patterns, pattern)
        self.maintain_budget()
        for _ in range(self.reprocess):
            self.process_old()
            for _ in range(self.optimize_steps):
                self.optimize()
            self.maintain_budget()


def evaluate(svm: StructuredSvm, feature: np.ndarray) -> float:
    """Sum over support vectors of coefficient times kernel."""
    return float(svm.evaluate_many(np.asarray(feature)[None, :])[0])


class EbtTracker(CoreTracker):
    """Structured-SVM appearance model on pyramid histogram features."""

    kind = "ebt"

    svm: Optional[StructuredSvm] = None
    cache: Dict[Tuple[float, float, float, float], np.ndarray] = Field(default_factory=dict)

    def _features(self, frame: Image, boxes: Sequence[BoundingBox]) -> np.ndarray:
        missing = [b for b in boxes if b.as_tuple() not in self.cache]
        if missing:
            for b, f in zip(missing, extract_features(frame, missing, self.cfg).astype(np.float32)):
                self.cache[b.as_tuple()] = f
        if not boxes:
            return np.zeros((0, feature_dim(self.cfg)), dtype=np.float32)
        return np.stack([self.cache[b.as_tuple()] for b in boxes])

    def init(self, frame: Image, box: BoundingBox, negatives: Sequence[BoundingBox]) -> None:
        self.check_init_box(frame, box)
        self.sigma = box.diagonal
        self.previous = box
        self.frame_index = 0
        self.svm = StructuredSvm.from_config(self.cfg, self.rng)
        self.cache = {}
        self.update(frame, box, negatives)

    def model_scores(self, frame: Image, boxes: Sequence[BoundingBox]) -> np.ndarray:
        self.cache = {}
        return self.svm.evaluate_many(self._features(frame, boxes))

    def update(self, frame: Image, estimate: BoundingBox, negatives: Sequence[BoundingBox]) -> None:
        key = estimate.as_tuple()
        seen = {key}
        boxes = [estimate]
        for b in negatives:
            if b.as_tuple() not in seen:
                seen.add(b.as_tuple())
                boxes.append(b)
        arr = boxes_to_array(boxes)
        pattern = SupportPattern(
            id=self.frame_index,
            boxes=arr,
            features=self._features(frame, boxes),
            loss=1.0 - iou_array(key, arr),
        )
        self.svm.add_pattern(pattern)
        self.cache = {}
        logger.debug(
            "Frame %d: %d support vectors over %d patterns", self.frame_index, len(self.svm.svs), len(self.svm.patterns)
        )

    def checkpoint(self) -> str:
        svm = self.svm
        order = {id(p): k for k, p in enumerate(svm.patterns)}
        record = {
            "version": CHECKPOINT_VERSION,
            "frame_index": self.frame_index,
            "sigma": self.sigma,
            "previous": list(self.previous.as_tuple()) if self.previous else None,
            "patterns": [{"id": p.id, "boxes": p.boxes.tolist()} for p in svm.patterns],
            "svs": [{"pattern": order[id(sv.pattern)], "y": sv.y, "b": sv.b} for sv in svm.svs],
        }
        return json.dumps(record)

    @classmethod
    def restore(cls, text: str, frames: Mapping[int, Image], cfg: RunConfig) -> "EbtTracker":
        """
        Rebuilds a tracker from `checkpoint` text, recomputing features from
        the frames the patterns came from.
        """
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid checkpoint: {exc}") from exc
        if record.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {record.get('version')}")
        tracker = cls(cfg=cfg, rng=np.random.default_rng(cfg.seed))
        tracker.frame_index = int(record["frame_index"])
        tracker.sigma = float(record["sigma"])
        if record["previous"] is not None:
            tracker.previous = BoundingBox.from_xywh(record["previous"])
        svm = StructuredSvm.from_config(cfg, tracker.rng)
        for entry in record["patterns"]:
            if entry["id"] not in frames:
                raise DataError(f"checkpoint needs frame {entry['id']} to rebuild features")
            arr = np.array(entry["boxes"], dtype=np.float64)
            boxes = [BoundingBox.from_xywh(row) for row in arr]
            svm.patterns.append(
                SupportPattern(
                    id=int(entry["id"]),
                    boxes=arr,
                    features=extract_features(frames[entry["id"]], boxes, cfg).astype(np.float32),
                    loss=1.0 - iou_array(arr[0], arr),
                )
            )
        for entry in record["svs"]:
            index = svm._add_sv(svm.patterns[entry["pattern"]], int(entry["y"]), 0.0)
            svm.svs[index].b = float(entry["b"])
        svm._recompute_gradients()
        tracker.svm = svm
        return tracker


def checkpoint(tracker: EbtTracker) -> str:
    return tracker.checkpoint()


def restore(text: str, frames: Mapping[int, Image], cfg: RunConfig) -> EbtTracker:
    return EbtTracker.restore(text, frames, cfg)
