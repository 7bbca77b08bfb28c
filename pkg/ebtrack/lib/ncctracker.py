"""Fixed-template normalised cross-correlation core."""
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from ..utils import setup_logging
from .base import CoreTracker
from .imgio import BoundingBox, Image, sample_indices, to_grayscale

logger = setup_logging(__name__)


class NccTemplate(BaseModel):
    """Gray canonical patch of the first frame with its cached moments."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray
    mean: float
    std: float

    @classmethod
    def from_patch(cls, patch: np.ndarray) -> "NccTemplate":
        pixels = np.asarray(patch, dtype=np.float64).copy()
        pixels.setflags(write=False)
        return cls(pixels=pixels, mean=float(pixels.mean()), std=float(pixels.std()))


def ncc(patch: np.ndarray, template: NccTemplate) -> float:
    """
    Correlation coefficient in [-1, 1]; 0 when either side has no variance.
    """
    return float(ncc_many(np.asarray(patch, dtype=np.float64)[None], template)[0])


def ncc_many(patches: np.ndarray, template: NccTemplate) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[1:] != template.pixels.shape:
        raise ValueError(f"patch shape {patches.shape[1:]} differs from template {template.pixels.shape}")
    n = template.pixels.size
    flat = patches.reshape(len(patches), n)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    centred = template.pixels.ravel() - template.mean
    cov = (flat - mean[:, None]) @ centred / n
    denom = std * template.std
    rho = np.divide(cov, denom, out=np.zeros_like(cov), where=denom > 0)
    return np.clip(rho, -1.0, 1.0)


def gray_patches(img: Image, boxes: Sequence[BoundingBox], size: int) -> np.ndarray:
    gray = to_grayscale(img).plane
    out = np.empty((len(boxes), size, size), dtype=np.float64)
    for k, b in enumerate(boxes):
        rows, cols = sample_indices(img, b, size, size)
        out[k] = gray[rows[:, None], cols[None, :]]
    return out


class NccTracker(CoreTracker):
    """
    Scores candidates by correlation with the first-frame template, which is
    never updated.
    """

    kind = "ncc_eb"

    template: Optional[NccTemplate] = None

    def init(self, frame: Image, box: BoundingBox, negatives: Sequence[BoundingBox]) -> None:
        self.check_init_box(frame, box)
        self.sigma = box.diagonal
        self.previous = box
        self.frame_index = 0
        self.template = NccTemplate.from_patch(gray_patches(frame, [box], self.cfg.patch_size)[0])
        logger.debug("NCC template: mean %.2f, std %.2f", self.template.mean, self.template.std)

    def model_scores(self, frame: Image, boxes: Sequence[BoundingBox]) -> np.ndarray:
        if not boxes:
            return np.zeros(0, dtype=np.float64)
        return ncc_many(gray_patches(frame, boxes, self.cfg.patch_size), self.template)

    def update(self, frame: Image, estimate: BoundingBox, negatives: Sequence[BoundingBox]) -> None:
        return None
