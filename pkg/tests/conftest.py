import numpy as np
import pytest

from ebtrack.lib.config import RunConfig, apply_overrides
from ebtrack.lib.evalharness import SynthSpec, Teleport, synth_sequence
from ebtrack.lib.imgio import BoundingBox, Image

SMALL = {
    "patch_size": 20,
    "pyramid_levels": 2,
    "svm_budget": 30,
    "svm_reprocess": 2,
    "svm_optimize_steps": 2,
    "max_proposals": 50,
    "local_count": 20,
    "rerank_pool_size": 50,
    "rerank_init_epochs": 10,
}


def square_image(
    width: int = 64, height: int = 48, box=(20, 14, 16, 16), inside: int = 200, outside: int = 40
) -> Image:
    """A solid bright rectangle on a dark background."""
    pixels = np.full((height, width), outside, dtype=np.uint8)
    x, y, w, h = box
    pixels[y : y + h, x : x + w] = inside
    return Image(pixels=pixels)


@pytest.fixture
def small_cfg():
    return apply_overrides(RunConfig(), SMALL)


@pytest.fixture
def square():
    return square_image()


@pytest.fixture
def blank():
    return Image(pixels=np.full((48, 64, 3), 128, dtype=np.uint8))


@pytest.fixture(scope="session")
def tiny_sequence():
    spec = SynthSpec(
        name="tiny",
        width=96,
        height=72,
        frames=8,
        object_w=24,
        object_h=24,
        seed=3,
        motion="random_walk",
        max_step=3,
        distractors=4,
    )
    return synth_sequence(spec)


@pytest.fixture(scope="session")
def teleport_sequence():
    spec = SynthSpec(
        name="jump",
        width=160,
        height=96,
        frames=10,
        object_w=24,
        object_h=24,
        start=(20, 36),
        seed=5,
        motion="static",
        teleports=[Teleport(frame=5, dx=100)],
        distractors=4,
    )
    return synth_sequence(spec)


@pytest.fixture
def unit_box():
    return BoundingBox(x=0.0, y=0.0, w=10.0, h=10.0)
