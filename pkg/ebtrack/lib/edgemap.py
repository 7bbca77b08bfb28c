"""
Edge structures of a frame: Sobel gradients, thinning, greedy edge grouping
and the pairwise affinities between groups used by objectness scoring.
"""
import csv
import heapq
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage, sparse

from ..utils import setup_logging
from .config import EdgeConfig
from .imgio import Image, save_image, to_grayscale

logger = setup_logging(__name__)

# Largest Sobel magnitude an 8-bit image can produce: |gx| <= 4*255 while
# |gy| <= 2*255 at the same pixel.
SOBEL_MAX = 255.0 * math.sqrt(20.0)

NEIGHBOURS_8 = tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx)


class EdgeGroup(BaseModel):
    """
    An 8-connected chain of thinned edge pixels with bounded turning.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: int
    pixels: np.ndarray  # (n, 2) rows of (x, y)
    mass: float
    mean_x: float
    mean_y: float
    theta: float  # edge tangent orientation in [0, pi)

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def bounds(self) -> Tuple[int, int, int, int]:
        """Inclusive (x0, y0, x1, y1) rectangle of the member pixels."""
        x0, y0 = self.pixels.min(axis=0)
        x1, y1 = self.pixels.max(axis=0)
        return int(x0), int(y0), int(x1), int(y1)


class EdgeStructures(BaseModel):
    """
    Everything objectness scoring needs from one frame. Built once, shared
    read-only afterwards.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int
    height: int
    magnitude: np.ndarray
    orientation: np.ndarray
    groups: List[EdgeGroup]
    labels: np.ndarray
    affinity: Dict[Tuple[int, int], float]
    adjacency: sparse.csr_matrix
    group_bounds: np.ndarray
    group_mass: np.ndarray
    integral: np.ndarray

    @property
    def group_position_index(self) -> np.ndarray:
        """Per-pixel group id, -1 where no group."""
        return self.labels

    @property
    def group_count(self) -> int:
        return len(self.groups)

    def affinity_of(self, i: int, j: int) -> float:
        if i == j:
            return 1.0
        return self.affinity.get((i, j), 0.0)

    def region_mass(self, x0: int, y0: int, x1: int, y1: int) -> float:
        """Grouped edge magnitude inside the half-open pixel rectangle."""
        if x1 <= x0 or y1 <= y0:
            return 0.0
        s = self.integral
        return float(s[y1, x1] - s[y0, x1] - s[y1, x0] + s[y0, x0])


def compute_gradients(gray: Image) -> Tuple[np.ndarray, np.ndarray]:
    """
    3x3 Sobel gradients with replicated borders.

    Returns the magnitude normalised to [0, 1] and the gradient orientation
    folded into [0, pi).
    """
    plane = gray.plane.astype(np.float64)
    gx = ndimage.sobel(plane, axis=1, mode="nearest")
    gy = ndimage.sobel(plane, axis=0, mode="nearest")
    magnitude = np.clip(np.hypot(gx, gy) / SOBEL_MAX, 0.0, 1.0)
    orientation = np.mod(np.arctan2(gy, gx), math.pi)
    orientation[orientation >= math.pi] = 0.0
    orientation[magnitude == 0.0] = 0.0
    return magnitude, orientation


def _shifted(values: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """values[y + dy, x + dx], zero outside the map."""
    out = np.zeros_like(values)
    h, w = values.shape
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[yd, xd] = values[ys, xs]
    return out


def nms_edges(magnitude: np.ndarray, orientation: np.ndarray) -> np.ndarray:
    """
    Keeps a pixel only when it is at least as strong as both nearest-pixel
    neighbours along its gradient direction.
    """
    if magnitude.shape != orientation.shape:
        raise ValueError("magnitude and orientation maps differ in shape")
    dx = np.floor(np.cos(orientation) + 0.5).astype(np.int64)
    dy = np.floor(np.sin(orientation) + 0.5).astype(np.int64)
    keep = magnitude > 0
    for oy, ox in {(int(a), int(b)) for a, b in zip(dy[keep], dx[keep])}:
        sel = keep & (dy == oy) & (dx == ox)
        forward = _shifted(magnitude, oy, ox)
        backward = _shifted(magnitude, -oy, -ox)
        keep &= ~sel | ((magnitude >= forward) & (magnitude >= backward))
    return np.where(keep, magnitude, 0.0)


def _axial_diff(a: float, b: float) -> float:
    d = abs(a - b)
    return min(d, math.pi - d)


def group_edges(
    thinned: np.ndarray, orientation: np.ndarray, cfg: Optional[EdgeConfig] = None
) -> Tuple[List[EdgeGroup], np.ndarray]:
    """
    Greedy frontier walk over pixels above the grouping threshold.

    Seeds are taken in raster order. From the current pixel every unassigned
    8-neighbour joins the frontier, keyed by its orientation difference to
    the pixel that reached it; the cheapest frontier pixel is taken next and
    its difference added to the walk's total. The walk ends once the total
    reaches the turn budget (that pixel stays unassigned) or the frontier
    runs dry.

    Returns the groups and the per-pixel label map (-1 for no group).
    """
    cfg = cfg or EdgeConfig()
    h, w = thinned.shape
    edge = thinned > cfg.edge_threshold
    labels = np.full((h, w), -1, dtype=np.int64)
    members: List[List[Tuple[int, int]]] = []
    for sy, sx in zip(*np.nonzero(edge)):
        if labels[sy, sx] >= 0:
            continue
        gid = len(members)
        current = (int(sy), int(sx))
        pixels = []
        frontier: List[Tuple[float, int, int, int]] = []
        queued = set()
        total = 0.0
        seq = 0
        while True:
            cy, cx = current
            labels[cy, cx] = gid
            pixels.append((cx, cy))
            o0 = orientation[cy, cx]
            for dy, dx in NEIGHBOURS_8:
                ny, nx = cy + dy, cx + dx
                if not (0 <= ny < h and 0 <= nx < w):
                    continue
                if not edge[ny, nx] or labels[ny, nx] >= 0 or (ny, nx) in queued:
                    continue
                queued.add((ny, nx))
                heapq.heappush(frontier, (_axial_diff(o0, orientation[ny, nx]), seq, ny, nx))
                seq += 1
            nxt = None
            while frontier:
                cost, _, ny, nx = heapq.heappop(frontier)
                if labels[ny, nx] < 0:
                    nxt = (cost, ny, nx)
                    break
            if nxt is None:
                break
            total += nxt[0]
            if total >= cfg.edge_turn_budget:
                break
            current = (nxt[1], nxt[2])
        members.append(pixels)
    groups = [_make_group(gid, pixels, thinned, orientation) for gid, pixels in enumerate(members)]
    return groups, labels


def _make_group(
    gid: int, pixels: List[Tuple[int, int]], magnitude: np.ndarray, orientation: np.ndarray
) -> EdgeGroup:
    coords = np.array(pixels, dtype=np.int64)
    xs, ys = coords[:, 0], coords[:, 1]
    m = magnitude[ys, xs]
    mass = float(m.sum())
    weights = m if mass > 0 else np.ones_like(m)
    doubled = 2.0 * orientation[ys, xs]
    normal = 0.5 * math.atan2(float((weights * np.sin(doubled)).sum()), float((weights * np.cos(doubled)).sum()))
    theta = math.fmod(normal + math.pi / 2 + 2 * math.pi, math.pi)
    if theta >= math.pi - 1e-12:
        theta = 0.0
    return EdgeGroup(
        id=gid,
        pixels=coords,
        mass=mass,
        mean_x=float(xs.mean()),
        mean_y=float(ys.mean()),
        theta=theta,
    )


def adjacent_pairs(labels: np.ndarray, radius: int = 2) -> np.ndarray:
    """
    (k, 2) array of group pairs i < j having member pixels within `radius`
    (Chebyshev) of each other.
    """
    pairs = []
    for dy in range(0, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx <= 0:
                continue
            other = np.full_like(labels, -1)
            h, w = labels.shape
            if dy >= h or abs(dx) >= w:
                continue
            src = labels[dy:, max(dx, 0) : w + min(dx, 0)]
            other[: h - dy, max(-dx, 0) : w - max(dx, 0)] = src
            a, b = labels, other
            hit = (a >= 0) & (b >= 0) & (a != b)
            if hit.any():
                pairs.append(np.stack([np.minimum(a[hit], b[hit]), np.maximum(a[hit], b[hit])], axis=1))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.concatenate(pairs), axis=0)


def pair_affinity(gi: EdgeGroup, gj: EdgeGroup, gamma: float = 2.0) -> float:
    """|cos(theta_i - theta_ij) * cos(theta_j - theta_ij)| ** gamma."""
    dx, dy = gj.mean_x - gi.mean_x, gj.mean_y - gi.mean_y
    theta_ij = gi.theta if dx == 0 and dy == 0 else math.atan2(dy, dx)
    return abs(math.cos(gi.theta - theta_ij) * math.cos(gj.theta - theta_ij)) ** gamma


def group_affinities(
    groups: List[EdgeGroup], labels: np.ndarray, cfg: Optional[EdgeConfig] = None
) -> Dict[Tuple[int, int], float]:
    """
    Symmetric affinity map over adjacent group pairs; pairs under the floor
    are left out.
    """
    cfg = cfg or EdgeConfig()
    affinity: Dict[Tuple[int, int], float] = {}
    for i, j in adjacent_pairs(labels, cfg.affinity_radius):
        a = pair_affinity(groups[i], groups[j], cfg.affinity_gamma)
        if a < cfg.affinity_floor:
            continue
        affinity[(int(i), int(j))] = a
        affinity[(int(j), int(i))] = a
    return affinity


def build_edge_structures(img: Image, cfg: Optional[EdgeConfig] = None) -> EdgeStructures:
    """
    Runs gradients, thinning, grouping and affinities on a frame and adds the
    lookup tables used by scoring.
    """
    cfg = cfg or EdgeConfig()
    gray = to_grayscale(img)
    magnitude, orientation = compute_gradients(gray)
    thinned = nms_edges(magnitude, orientation)
    groups, labels = group_edges(thinned, orientation, cfg)
    affinity = group_affinities(groups, labels, cfg)
    count = len(groups)
    if affinity:
        keys = np.array(list(affinity.keys()), dtype=np.int64)
        values = np.array(list(affinity.values()), dtype=np.float64)
        adjacency = sparse.csr_matrix((values, (keys[:, 0], keys[:, 1])), shape=(count, count))
    else:
        adjacency = sparse.csr_matrix((count, count), dtype=np.float64)
    bounds = (
        np.array([g.bounds for g in groups], dtype=np.int64) if groups else np.zeros((0, 4), dtype=np.int64)
    )
    mass = np.array([g.mass for g in groups], dtype=np.float64)
    grouped = np.where(labels >= 0, thinned, 0.0)
    integral = np.zeros((gray.height + 1, gray.width + 1), dtype=np.float64)
    integral[1:, 1:] = grouped.cumsum(axis=0).cumsum(axis=1)
    logger.debug("Edge structures: %d groups, %d affinity pairs", count, len(affinity) // 2)
    return EdgeStructures(
        width=gray.width,
        height=gray.height,
        magnitude=thinned,
        orientation=orientation,
        groups=groups,
        labels=labels,
        affinity=affinity,
        adjacency=adjacency,
        group_bounds=bounds,
        group_mass=mass,
        integral=integral,
    )


def write_edge_map(es: EdgeStructures, path: Union[str, Path]) -> None:
    """Thinned magnitude as an 8-bit PGM."""
    pixels = np.clip(np.floor(es.magnitude * 255.0 + 0.5), 0, 255).astype(np.uint8)
    save_image(Image(pixels=pixels), path)


def write_groups_csv(es: EdgeStructures, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["group", "size", "mass", "mean_x", "mean_y", "theta"])
        for g in es.groups:
            writer.writerow([g.id, g.size, f"{g.mass:.6f}", f"{g.mean_x:.3f}", f"{g.mean_y:.3f}", f"{g.theta:.6f}"])
