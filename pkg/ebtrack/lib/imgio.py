"""
Frame sequences, ground truth and pixel access.

Frames are read with Pillow and held as read-only numpy arrays of shape
(height, width, channels). Only binary PPM/PGM and uncompressed BMP are
accepted so fixtures stay bit-exact.
"""
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image as PILImage
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from ..utils import DataError, retry, setup_logging

logger = setup_logging(__name__)

FRAME_SUFFIXES = (".ppm", ".pgm", ".bmp")
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

PathLike = Union[str, Path]


class Image(BaseModel):
    """
    An immutable frame: uint8 pixels laid out (height, width, channels),
    channels being 3 (RGB) or 1 (gray).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray

    @field_validator("pixels")
    @classmethod
    def _freeze_pixels(cls, value: np.ndarray) -> np.ndarray:
        array = np.asarray(value)
        if array.ndim == 2:
            array = array[:, :, None]
        if array.ndim != 3 or array.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) pixels, got shape {array.shape}")
        if array.shape[0] < 1 or array.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if array.dtype != np.uint8:
            if np.any(array < 0) or np.any(array > 255):
                raise ValueError("intensities must lie in [0, 255]")
            array = array.astype(np.uint8)
        array = np.array(array, dtype=np.uint8, copy=True)
        array.setflags(write=False)
        return array

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def channels(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def plane(self) -> np.ndarray:
        """The single gray plane (height, width) of a gray image."""
        return self.pixels[:, :, 0]


class BoundingBox(BaseModel):
    """
    Axis-aligned box in 0-based pixel coordinates; (x, y) is the top-left
    corner, the box covers [x, x + w) x [y, y + h).
    """

    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    w: float
    h: float

    @model_validator(mode="after")
    def _positive_size(self) -> "BoundingBox":
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box size must be positive, got {self.w}x{self.h}")
        return self

    @classmethod
    def from_xywh(cls, values: Sequence[float]) -> "BoundingBox":
        x, y, w, h = (float(v) for v in values)
        return cls(x=x, y=y, w=w, h=h)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.w * self.w + self.h * self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def pixel_bounds(self, width: int, height: int) -> Tuple[int, int, int, int]:
        """Half-open integer bounds (x0, y0, x1, y1), rounded half-up and clamped."""
        x0 = min(max(round_half_up(self.x), 0), width)
        y0 = min(max(round_half_up(self.y), 0), height)
        x1 = min(max(round_half_up(self.x + self.w), 0), width)
        y1 = min(max(round_half_up(self.y + self.h), 0), height)
        return x0, y0, x1, y1

    def clamp_to(self, width: int, height: int) -> "BoundingBox":
        """Translate the box inside the frame, keeping its size when it fits."""
        x = min(max(self.x, 0.0), max(width - self.w, 0.0))
        y = min(max(self.y, 0.0), max(height - self.h, 0.0))
        if x == self.x and y == self.y:
            return self
        return BoundingBox(x=x, y=y, w=self.w, h=self.h)

    def intersects_frame(self, width: int, height: int) -> bool:
        return self.x < width and self.y < height and self.x + self.w > 0 and self.y + self.h > 0


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    """(n, 4) float array of x, y, w, h."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def array_to_boxes(values: np.ndarray) -> List[BoundingBox]:
    return [BoundingBox(x=float(x), y=float(y), w=float(w), h=float(h)) for x, y, w, h in values]


def iou_array(ref: Sequence[float], boxes: np.ndarray) -> np.ndarray:
    """Intersection over union of one (x, y, w, h) box against each row of `boxes`."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x, y, w, h = (float(v) for v in ref)
    ix = np.maximum(0.0, np.minimum(x + w, boxes[:, 0] + boxes[:, 2]) - np.maximum(x, boxes[:, 0]))
    iy = np.maximum(0.0, np.minimum(y + h, boxes[:, 1] + boxes[:, 3]) - np.maximum(y, boxes[:, 1]))
    inter = ix * iy
    union = w * h + boxes[:, 2] * boxes[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    return float(iou_array(a.as_tuple(), np.array([b.as_tuple()]))[0])


@retry()
def _read_frame(path: Path) -> np.ndarray:
    with PILImage.open(path) as handle:
        if handle.format not in ("PPM", "BMP"):
            raise DataError(f"{path.name}: unsupported raster format {handle.format}")
        if handle.mode == "RGB":
            return np.asarray(handle, dtype=np.uint8)
        if handle.mode == "L":
            return np.asarray(handle, dtype=np.uint8)[:, :, None]
        raise DataError(f"{path.name}: unsupported pixel mode {handle.mode}")


def load_image(path: PathLike) -> Image:
    path = Path(path)
    try:
        return Image(pixels=_read_frame(path))
    except DataError:
        raise
    except OSError as exc:
        raise DataError(f"cannot read frame {path}: {exc}") from exc


def list_frames(directory: PathLike) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"sequence directory {directory} does not exist")
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in FRAME_SUFFIXES
    )


def load_sequence(directory: PathLike) -> List[Image]:
    """
    Loads every frame of a directory in file-name order.

    All frames must share width, height and channel count; the first frame
    that does not is named in the error.
    """
    paths = list_frames(directory)
    if not paths:
        raise DataError(f"no frames found in {directory}")
    frames: List[Image] = []
    for index, path in enumerate(paths):
        frame = load_image(path)
        if frames and frame.pixels.shape != frames[0].pixels.shape:
            raise DataError(
                f"frame {index} ({path.name}) is {frame.width}x{frame.height}x{frame.channels}, "
                f"expected {frames[0].width}x{frames[0].height}x{frames[0].channels}"
            )
        frames.append(frame)
    logger.info("Loaded %d frames from %s", len(frames), directory)
    return frames


def save_image(img: Image, path: PathLike) -> None:
    """Writes PPM for RGB and PGM for gray images (binary variants)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if img.channels == 3:
        PILImage.fromarray(np.ascontiguousarray(img.pixels), mode="RGB").save(path, format="PPM")
    else:
        PILImage.fromarray(np.ascontiguousarray(img.plane), mode="L").save(path, format="PPM")


def to_grayscale(img: Image) -> Image:
    """Rec. 601 luma, rounded half-up; gray input is returned unchanged."""
    if img.channels == 1:
        return img
    rgb = img.pixels.astype(np.float64)
    luma = LUMA_WEIGHTS[0] * rgb[:, :, 0] + LUMA_WEIGHTS[1] * rgb[:, :, 1] + LUMA_WEIGHTS[2] * rgb[:, :, 2]
    gray = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return Image(pixels=gray[:, :, None])


def sample_indices(img: Image, b: BoundingBox, out_w: int, out_h: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest-neighbour source rows/columns for resampling `b` to out_w x out_h,
    clamped to the image (border replication).
    """
    if not b.intersects_frame(img.width, img.height):
        raise DataError(f"box {b.as_tuple()} lies fully outside the {img.width}x{img.height} frame")
    cols = np.floor(b.x + (np.arange(out_w) + 0.5) * (b.w / out_w)).astype(np.int64)
    rows = np.floor(b.y + (np.arange(out_h) + 0.5) * (b.h / out_h)).astype(np.int64)
    np.clip(cols, 0, img.width - 1, out=cols)
    np.clip(rows, 0, img.height - 1, out=rows)
    return rows, cols


def crop_resample(img: Image, b: BoundingBox, out_w: int, out_h: int) -> Image:
    """
    Resamples the sub-window `b` into an out_w x out_h image with
    nearest-neighbour sampling; outside pixels replicate the border.
    """
    rows, cols = sample_indices(img, b, out_w, out_h)
    return Image(pixels=img.pixels[rows[:, None], cols[None, :]])


def load_ground_truth(path: PathLike) -> List[Optional[BoundingBox]]:
    """
    Reads OTB-style ground truth, one "x,y,w,h" row per frame (comma, tab or
    space separated, 1-based). Rows of zeros or NaN mark absent ground truth.
    Blank lines are only allowed after the last row.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"ground-truth file {path} does not exist")
    boxes: List[Optional[BoundingBox]] = []
    lines = path.read_text(encoding="utf-8").rstrip().splitlines()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            raise DataError(f"{path.name}:{number}: blank line inside the ground truth")
        fields = [f for f in line.replace("\t", ",").replace(" ", ",").split(",") if f]
        if len(fields) != 4:
            raise DataError(f"{path.name}:{number}: expected 4 values, got {len(fields)}")
        try:
            x, y, w, h = (float(f) for f in fields)
        except ValueError as exc:
            raise DataError(f"{path.name}:{number}: non-numeric value") from exc
        if any(math.isnan(v) for v in (x, y, w, h)) or w <= 0 or h <= 0:
            boxes.append(None)
            continue
        boxes.append(BoundingBox(x=x - 1.0, y=y - 1.0, w=w, h=h))
    return boxes


def write_ground_truth(path: PathLike, boxes: Sequence[Optional[BoundingBox]]) -> None:
    """Writes boxes in the 1-based comma-separated convention; None as zeros."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for box in boxes:
        if box is None:
            lines.append("0,0,0,0")
        else:
            lines.append(f"{_fmt(box.x + 1.0)},{_fmt(box.y + 1.0)},{_fmt(box.w)},{_fmt(box.h)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))
