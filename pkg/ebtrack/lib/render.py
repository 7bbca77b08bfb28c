"""Box overlays on frames and precision/success plots."""
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  pylint: disable=wrong-import-position
import numpy as np  # noqa: E402
from PIL import Image as PILImage  # noqa: E402
from PIL import ImageDraw  # noqa: E402

from ..utils import setup_logging  # noqa: E402
from .evalharness import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, MetricCurves  # noqa: E402
from .imgio import BoundingBox, Image, save_image  # noqa: E402

logger = setup_logging(__name__)

Color = Tuple[int, int, int]

ESTIMATE_COLOR: Color = (255, 40, 40)
TRUTH_COLOR: Color = (40, 220, 40)
PROPOSAL_COLOR: Color = (60, 120, 255)


def draw_boxes(img: Image, boxes: Sequence[BoundingBox], color: Color, width: int = 1) -> Image:
    """Returns a copy of `img` (as RGB) with the box outlines drawn."""
    pixels = img.pixels if img.channels == 3 else np.repeat(img.pixels, 3, axis=2)
    canvas = PILImage.fromarray(np.ascontiguousarray(pixels), mode="RGB")
    draw = ImageDraw.Draw(canvas)
    for b in boxes:
        x0, y0, x1, y1 = b.pixel_bounds(img.width, img.height)
        if x1 <= x0 or y1 <= y0:
            continue
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], outline=color, width=width)
    return Image(pixels=np.asarray(canvas, dtype=np.uint8))


def overlay(
    img: Image,
    estimate: Optional[BoundingBox] = None,
    truth: Optional[BoundingBox] = None,
    proposals: Sequence[BoundingBox] = (),
) -> Image:
    """Proposals first, then the ground truth, then the estimate on top."""
    out = draw_boxes(img, proposals, PROPOSAL_COLOR)
    if truth is not None:
        out = draw_boxes(out, [truth], TRUTH_COLOR, width=2)
    if estimate is not None:
        out = draw_boxes(out, [estimate], ESTIMATE_COLOR, width=2)
    return out


def write_overlays(
    frames: Sequence[Image],
    trajectory: Sequence[BoundingBox],
    directory: Union[str, Path],
    gt: Optional[Sequence[Optional[BoundingBox]]] = None,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, (frame, estimate) in enumerate(zip(frames, trajectory), start=1):
        truth = gt[index - 1] if gt is not None else None
        save_image(overlay(frame, estimate=estimate, truth=truth), directory / f"{index:04d}.ppm")
    logger.info("Wrote %d overlays to %s", len(trajectory), directory)
    return directory


def plot_curves(curves: Dict[str, MetricCurves], path: Union[str, Path], width: float = 10.0) -> Path:
    """
    Side-by-side precision and success plots; the legend carries PS@20 and
    AUC. The format follows the file suffix (svg, png, pdf).
    """
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(width, width * golden_ratio / 2), facecolor="w")
    for name, c in sorted(curves.items(), key=lambda kv: -kv[1].auc):
        ax_p.plot(PRECISION_THRESHOLDS, c.precision, label=f"{name} [{c.ps20:.3f}]")
        ax_s.plot(SUCCESS_THRESHOLDS, c.success, label=f"{name} [{c.auc:.3f}]")
    ax_p.set_title("Precision plot")
    ax_p.set_xlabel("Location error threshold (px)")
    ax_p.set_ylabel("Precision")
    ax_s.set_title("Success plot")
    ax_s.set_xlabel("Overlap threshold")
    ax_s.set_ylabel("Success rate")
    for ax in (ax_p, ax_s):
        ax.set_ylim(0.0, 1.0)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right" if ax is ax_p else "lower left", fontsize="small")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
