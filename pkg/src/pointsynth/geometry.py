"""Shape-regularized pseudo instance masks from point annotations.

Every point becomes an ellipse whose area is drawn between a lower bound and
an upper bound that shrinks with the distance to the nearest neighbouring
point, so crowded regions get small, mostly non-overlapping objects.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


class PointGenerationWarning(UserWarning):
    """Raised when dart throwing cannot place the requested number of points."""


@dataclass(frozen=True)
class PointLabel:
    points: np.ndarray
    canvas_size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        h, w = (int(v) for v in self.canvas_size)
        if h <= 0 or w <= 0:
            raise ValueError(f"invalid canvas size {self.canvas_size}")
        if len(pts):
            inside = (pts[:, 0] >= 0) & (pts[:, 0] < h) & (pts[:, 1] >= 0) & (pts[:, 1] < w)
            if not inside.all():
                raise ValueError(f"points outside canvas: {pts[~inside][:5].tolist()}")
            if len(np.unique(pts, axis=0)) != len(pts):
                raise ValueError("duplicate points")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "canvas_size", (h, w))

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointLabel):
            return NotImplemented
        return self.canvas_size == other.canvas_size and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash((self.canvas_size, self.points.tobytes()))

    def crop(self, top: int, left: int, height: int, width: int) -> "PointLabel":
        pts = self.points - np.array([top, left])
        keep = (pts[:, 0] >= 0) & (pts[:, 0] < height) & (pts[:, 1] >= 0) & (pts[:, 1] < width)
        return PointLabel(pts[keep], (height, width))


@dataclass(frozen=True)
class EllipseParams:
    center: tuple[float, float]
    area: float
    angle: float
    eccentricity: float

    @property
    def axis_ratio(self) -> float:
        return math.sqrt(1.0 - self.eccentricity ** 2)

    @property
    def semi_major(self) -> float:
        return math.sqrt(self.area / (math.pi * self.axis_ratio))

    @property
    def semi_minor(self) -> float:
        return self.semi_major * self.axis_ratio


@dataclass(frozen=True)
class DensityEstimate:
    nn_distance: np.ndarray
    area_lower: np.ndarray
    area_upper: np.ndarray


@dataclass
class SamplerConfig:
    area_min: float = 40.0
    area_max: float = 1200.0
    overlap_kappa: float = 0.5
    ecc_max: float = 0.9
    count_min: int = 300
    count_max: int = 700
    min_spacing: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.area_min <= self.area_max:
            raise ValueError("need 0 < area_min <= area_max")
        if self.overlap_kappa <= 0:
            raise ValueError("overlap_kappa must be positive")
        if not 0 <= self.ecc_max < 1:
            raise ValueError("ecc_max must lie in [0, 1)")
        if not 0 <= self.count_min <= self.count_max:
            raise ValueError("need 0 <= count_min <= count_max")
        if self.min_spacing < 0:
            raise ValueError("min_spacing must be >= 0")


def nearest_neighbor_distances(p: PointLabel) -> np.ndarray:
    """Euclidean distance from every point to its closest other point.

    A lone point has no neighbour; it gets a quarter of the shorter canvas side.
    """
    if len(p) == 0:
        raise ValueError("no points")
    if len(p) == 1:
        return np.array([min(p.canvas_size) / 4.0])
    tree = cKDTree(p.points.astype(np.float64))
    dist, _ = tree.query(p.points.astype(np.float64), k=2)
    return dist[:, 1]


def area_upper_bound(nn_distance, area_max: float, kappa: float):
    return np.minimum(area_max, math.pi * (kappa * np.asarray(nn_distance, dtype=np.float64)) ** 2)


def estimate_density(p: PointLabel, config: SamplerConfig) -> DensityEstimate:
    d = nearest_neighbor_distances(p)
    b = area_upper_bound(d, config.area_max, config.overlap_kappa)
    # a crowded point can have b below the global floor; the floor yields
    a = np.minimum(config.area_min, b)
    return DensityEstimate(nn_distance=d, area_lower=a, area_upper=b)


def sample_ellipse_params(point, area_lower: float, area_upper: float,
                          rng: np.random.Generator, ecc_max: float = 0.9) -> EllipseParams:
    if area_lower > area_upper:
        raise ValueError("degenerate area bounds")
    if area_lower <= 0:
        raise ValueError("area bounds must be positive")
    area = float(rng.uniform(area_lower, area_upper))
    angle = float(rng.uniform(0.0, math.pi))
    ecc = float(rng.uniform(0.0, ecc_max))
    return EllipseParams(center=(float(point[0]), float(point[1])), area=area,
                         angle=angle, eccentricity=ecc)


def rasterize_ellipses(ellipses: Sequence[EllipseParams], canvas_size,
                       return_index: bool = False):
    """Paint ellipses into an integer label image.

    A pixel belongs to ellipse ``k`` when its normalized radius is at most one;
    overlaps go to the ellipse with the smallest normalized radius (lowest
    index on ties). The pixel under each centre always keeps its own id.

    Args:
        ellipses: ellipse parameters; ids follow this order.
        canvas_size: (height, width).
        return_index: also return, for every output id, the index of the
            source ellipse (instances that end up empty are dropped).

    Returns:
        int32 label image, optionally with the index array.
    """
    h, w = (int(v) for v in canvas_size)
    labels = np.zeros((h, w), dtype=np.int32)
    best = np.full((h, w), np.inf)
    seeds = []
    for k, e in enumerate(ellipses, start=1):
        r0, c0 = e.center
        A, B = e.semi_major, e.semi_minor
        ext = int(math.ceil(A)) + 1
        top, bot = max(0, int(math.floor(r0)) - ext), min(h, int(math.ceil(r0)) + ext + 1)
        lef, rig = max(0, int(math.floor(c0)) - ext), min(w, int(math.ceil(c0)) + ext + 1)
        if top >= bot or lef >= rig:
            continue
        rr, cc = np.mgrid[top:bot, lef:rig]
        dr, dc = rr - r0, cc - c0
        ca, sa = math.cos(e.angle), math.sin(e.angle)
        u = dc * ca + dr * sa
        v = -dc * sa + dr * ca
        rho = (u / A) ** 2 + (v / B) ** 2
        win_best = best[top:bot, lef:rig]
        take = (rho <= 1.0) & (rho < win_best)
        win_best[take] = rho[take]
        labels[top:bot, lef:rig][take] = k
        sr, sc = int(round(r0)), int(round(c0))
        if 0 <= sr < h and 0 <= sc < w:
            seeds.append((sr, sc, k))
    for sr, sc, k in seeds:
        labels[sr, sc] = k
        best[sr, sc] = -1.0

    present = np.zeros(len(ellipses) + 1, dtype=bool)
    present[np.unique(labels)] = True
    present[0] = False
    lut = np.zeros(len(ellipses) + 1, dtype=np.int32)
    lut[present] = np.arange(1, present.sum() + 1, dtype=np.int32)
    labels = lut[labels]
    if return_index:
        return labels, np.flatnonzero(present) - 1
    return labels


def sample_ellipses(p: PointLabel, config: SamplerConfig, rng: np.random.Generator):
    """Draw one ellipse per point; returns (ellipses, density)."""
    density = estimate_density(p, config)
    ellipses = [
        sample_ellipse_params(pt, a, b, rng, config.ecc_max)
        for pt, a, b in zip(p.points, density.area_lower, density.area_upper)
    ]
    return ellipses, density


def sample_instance_mask(p: PointLabel, config: SamplerConfig | None = None,
                         seed=None) -> np.ndarray:
    config = config or SamplerConfig()
    if len(p) == 0:
        return np.zeros(p.canvas_size, dtype=np.int32)
    rng = np.random.default_rng(config.seed if seed is None else seed)
    ellipses, _ = sample_ellipses(p, config, rng)
    labels, kept = rasterize_ellipses(ellipses, p.canvas_size, return_index=True)
    if len(kept) < len(ellipses):
        dropped = sorted(set(range(len(ellipses))) - set(kept.tolist()))
        log.warning("dropped %d fully occluded instances: %s", len(dropped), dropped[:20])
    return labels


def _throw_darts(count: int, min_spacing: float, canvas_size, rng: np.random.Generator):
    h, w = canvas_size
    accepted = np.empty((count, 2), dtype=np.int64)
    n = 0
    spacing2 = float(min_spacing) ** 2
    for _ in range(10 * count):
        if n == count:
            break
        cand = np.array([rng.integers(0, h), rng.integers(0, w)])
        if n:
            d2 = ((accepted[:n] - cand) ** 2).sum(axis=1)
            if d2.min() < spacing2 or d2.min() == 0:
                continue
        accepted[n] = cand
        n += 1
    return accepted[:n]


def generate_point_labels(n_images: int, count_range, min_spacing: float, canvas_size,
                          seed: int) -> list[PointLabel]:
    """Fully synthetic point labels by dart throwing with rejection.

    Image ``i`` uses its own generator derived from ``(seed, i)``, so labels
    can be produced in any order or in parallel.
    """
    lo, hi = (int(v) for v in count_range)
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid count range {count_range}")
    if min_spacing < 0:
        raise ValueError("min_spacing must be >= 0")
    canvas_size = tuple(int(v) for v in canvas_size)
    labels = []
    for i in range(n_images):
        rng = np.random.default_rng([int(seed), i])
        count = int(rng.integers(lo, hi + 1))
        pts = _throw_darts(count, min_spacing, canvas_size, rng)
        if len(pts) < count:
            warnings.warn(
                f"image {i}: placed {len(pts)} of {count} points at spacing {min_spacing}",
                PointGenerationWarning, stacklevel=2)
        labels.append(PointLabel(pts, canvas_size))
    return labels


def dilate_points(p: PointLabel, radius: float) -> np.ndarray:
    """Boolean map with a disk of ``radius`` around every point."""
    out = np.zeros(p.canvas_size, dtype=bool)
    h, w = p.canvas_size
    r = int(math.floor(radius))
    dr, dc = np.mgrid[-r:r + 1, -r:r + 1]
    disk = dr ** 2 + dc ** 2 <= radius ** 2
    offs = np.stack([dr[disk], dc[disk]], axis=1)
    for pt in p.points:
        rc = pt + offs
        ok = (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
        out[rc[ok, 0], rc[ok, 1]] = True
    return out
