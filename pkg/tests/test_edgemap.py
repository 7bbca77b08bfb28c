import math

import numpy as np
import pytest

from ebtrack.lib.config import EdgeConfig
from ebtrack.lib.edgemap import (
    adjacent_pairs,
    build_edge_structures,
    compute_gradients,
    group_edges,
    nms_edges,
    pair_affinity,
    write_edge_map,
    write_groups_csv,
)
from ebtrack.lib.imgio import Image, load_image, to_grayscale


@pytest.fixture
def vertical_step():
    pixels = np.zeros((20, 20), dtype=np.uint8)
    pixels[:, 10:] = 200
    return Image(pixels=pixels)


def test_gradients_of_a_vertical_step(vertical_step):
    magnitude, orientation = compute_gradients(vertical_step)
    assert magnitude.shape == (20, 20)
    assert magnitude.max() <= 1.0 and magnitude.min() >= 0.0
    assert np.all(magnitude[:, :8] == 0.0)
    assert magnitude[5, 9] == pytest.approx(800.0 / (255.0 * math.sqrt(20.0)))
    assert orientation[5, 9] == 0.0
    assert np.all((orientation >= 0.0) & (orientation < math.pi))


def _diagonal(bright_below: bool) -> Image:
    y, x = np.mgrid[0:20, 0:20]
    region = x + y >= 20 if bright_below else x - y >= 0
    return Image(pixels=np.where(region, 200, 0).astype(np.uint8))


@pytest.mark.parametrize("bright_below, expected", [(True, math.pi / 4), (False, 3 * math.pi / 4)])
def test_gradients_of_a_diagonal_step(bright_below, expected):
    # y grows downwards: brighter towards the bottom right points at pi/4
    magnitude, orientation = compute_gradients(_diagonal(bright_below))
    inner = np.zeros_like(magnitude, dtype=bool)
    inner[2:-2, 2:-2] = True
    edge = inner & (magnitude > 0)
    assert edge.any()
    assert np.allclose(orientation[edge], expected, atol=1e-12)


def _axial_gap(a, b):
    d = np.abs(a - b) % math.pi
    return np.minimum(d, math.pi - d)


def test_quarter_turn_rotates_orientation(tiny_sequence):
    gray = to_grayscale(tiny_sequence.frames[0])
    magnitude, orientation = compute_gradients(gray)
    turned_mag, turned = compute_gradients(Image(pixels=np.ascontiguousarray(np.rot90(gray.pixels))))
    assert np.allclose(turned_mag, np.rot90(magnitude), atol=1e-12)
    edge = turned_mag > 1e-6
    assert edge.any()
    expected = np.mod(np.rot90(orientation) + math.pi / 2, math.pi)
    assert np.all(_axial_gap(turned[edge], expected[edge]) < 1e-9)


def test_brightness_offset_keeps_the_magnitude(tiny_sequence):
    plane = np.minimum(to_grayscale(tiny_sequence.frames[0]).pixels, 200)
    magnitude, orientation = compute_gradients(Image(pixels=plane))
    shifted_mag, shifted = compute_gradients(Image(pixels=plane + np.uint8(40)))
    assert np.array_equal(shifted_mag, magnitude)
    assert np.array_equal(shifted, orientation)


def test_flat_image_has_no_edges(blank):
    es = build_edge_structures(blank)
    assert es.group_count == 0
    assert not es.magnitude.any()
    assert es.adjacency.nnz == 0


def test_thinning_keeps_the_ridge():
    magnitude = np.zeros((5, 7))
    magnitude[:, 2], magnitude[:, 3], magnitude[:, 4] = 0.3, 0.9, 0.3
    thinned = nms_edges(magnitude, np.zeros_like(magnitude))
    assert np.all(thinned[:, 3] == 0.9)
    assert not thinned[:, [2, 4]].any()
    with pytest.raises(ValueError):
        nms_edges(magnitude, np.zeros((2, 2)))


def test_straight_line_is_one_group():
    thinned = np.zeros((10, 12))
    thinned[4, 1:11] = 0.5
    groups, labels = group_edges(thinned, np.zeros_like(thinned))
    assert len(groups) == 1
    assert groups[0].size == 10
    assert groups[0].bounds == (1, 4, 10, 4)
    assert groups[0].mass == pytest.approx(5.0)
    assert (labels >= 0).sum() == 10


def test_turn_budget_splits_a_corner():
    thinned = np.zeros((12, 12))
    orientation = np.zeros((12, 12))
    thinned[2, 2:10] = 0.5
    orientation[2, 2:10] = math.pi / 2
    thinned[3:10, 9] = 0.5
    groups, labels = group_edges(thinned, orientation, EdgeConfig(edge_turn_budget=math.pi / 2))
    assert len(groups) == 2
    assert sorted(g.size for g in groups) == [7, 8]
    assert set(np.unique(labels[thinned > 0])) == {0, 1}


def test_group_tangent_is_perpendicular_to_the_gradient():
    thinned = np.zeros((6, 6))
    thinned[1:5, 3] = 0.5
    groups, _ = group_edges(thinned, np.zeros_like(thinned))
    assert groups[0].theta == pytest.approx(math.pi / 2)


def test_adjacency_radius():
    labels = np.full((5, 9), -1)
    labels[2, 0:3] = 0
    labels[2, 5:8] = 1
    assert len(adjacent_pairs(labels, radius=2)) == 0
    assert adjacent_pairs(labels, radius=3).tolist() == [[0, 1]]


def test_affinities_are_symmetric_and_bounded(square):
    es = build_edge_structures(square)
    assert es.group_count > 0
    for (i, j), value in es.affinity.items():
        assert 0.0 <= value <= 1.0
        assert es.affinity[(j, i)] == value
        assert es.affinity_of(i, j) == es.adjacency[i, j]
    assert es.affinity_of(0, 0) == 1.0


def test_collinear_groups_have_full_affinity():
    thinned = np.zeros((5, 20))
    orientation = np.full((5, 20), math.pi / 2)
    thinned[2, 0:8] = 0.5
    thinned[2, 9:18] = 0.5
    orientation[2, 8] = 0.0
    groups, _ = group_edges(thinned, orientation)
    a, b = groups
    assert pair_affinity(a, b) == pytest.approx(1.0)


def test_structures_are_consistent(square):
    es = build_edge_structures(square)
    assert es.width == 64 and es.height == 48
    assert es.integral[-1, -1] == pytest.approx(es.group_mass.sum())
    assert es.region_mass(0, 0, 64, 48) == pytest.approx(es.group_mass.sum())
    assert es.region_mass(5, 5, 5, 10) == 0.0
    for g, bounds in zip(es.groups, es.group_bounds):
        assert tuple(bounds) == g.bounds
        assert np.all(es.labels[g.pixels[:, 1], g.pixels[:, 0]] == g.id)


def test_rgb_and_gray_frames_agree(tiny_sequence):
    frame = tiny_sequence.frames[0]
    a = build_edge_structures(frame)
    b = build_edge_structures(to_grayscale(frame))
    assert a.group_count == b.group_count
    assert np.array_equal(a.labels, b.labels)


def test_debug_outputs(tmp_path, square):
    es = build_edge_structures(square)
    write_edge_map(es, tmp_path / "edges.pgm")
    write_groups_csv(es, tmp_path / "groups.csv")
    edges = load_image(tmp_path / "edges.pgm")
    assert edges.width == 64 and edges.channels == 1
    assert len((tmp_path / "groups.csv").read_text().splitlines()) == es.group_count + 1
