"""The scene map: neural points plus an exact spatial index.

Points are stored struct-of-arrays for vectorised queries; `NeuralPoint`
is the per-point view used by small-scale callers and tests.  Neighbor
search is exact (scipy cKDTree), so renders are deterministic and every
query can be checked against a brute-force scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import AllFiltered, DimensionMismatch, EmptyCloud, NonFiniteCoordinate, OutOfBounds
from .geometry import bilinear_sample_many

AGNOSTIC_DIM = 128


@dataclass(frozen=True)
class NeuralPoint:
    """One scene point: position, matching descriptor, render feature, weights."""

    position: np.ndarray
    agnostic_descriptor: np.ndarray
    render_feature: np.ndarray
    confidence: float
    score: float


@dataclass
class PointField:
    """Immutable-after-build neural point cloud with an exact KNN index.

    positions (N,3), descriptors (N,F_a) unit rows, features (N,F_r),
    confidences/scores (N,) in [0,1].  `neighbor_radius` and
    `kernel_width` derive from the mean nearest-neighbor spacing unless
    overridden; `density_scale` calibrates volumetric density so one
    point shell is near-opaque (see renderer).
    """

    positions: np.ndarray
    descriptors: np.ndarray
    features: np.ndarray
    confidences: np.ndarray
    scores: np.ndarray
    scene_diameter: float = 0.0
    neighbor_radius: float = 0.0
    kernel_width: float = 0.0
    density_scale: float = 0.0
    _tree: Optional[cKDTree] = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.positions)

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.positions))
        return self._tree

    def point(self, i) -> NeuralPoint:
        return NeuralPoint(self.positions[i], self.descriptors[i],
                           self.features[i], float(self.confidences[i]),
                           float(self.scores[i]))


def _mean_nn_spacing(positions, tree):
    """Grid-equivalent point spacing, robust to overlapping-view clumps.

    The 4th-neighbor distance of a uniform grid is ~1.35x its pitch, so
    dividing by that recovers the pitch even when immediate neighbors
    are duplicated by overlapping source views.
    """
    if len(positions) < 2:
        return 1.0
    k = min(5, len(positions))
    d, _ = tree.query(positions, k=k)
    return float(np.mean(d[:, k - 1])) / 1.35


def build_field(positions, descriptors=None, features=None, confidences=None,
                scores=None, neighbor_radius=None, kernel_width=None,
                density_scale=None, feature_dim=32) -> PointField:
    """Assemble a PointField and its spatial index.

    Missing attributes get neutral defaults (zero features, unit
    confidence, unit score).  Radius defaults to 2x the grid-equivalent
    point spacing, kernel width to 0.9x spacing, density scale to
    2/kernel_width (near-opaque across one point shell).
    """
    pos = np.ascontiguousarray(positions, dtype=float)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise DimensionMismatch("positions must be (N, 3)")
    if len(pos) == 0:
        raise EmptyCloud("a point field needs at least one point")
    if not np.all(np.isfinite(pos)):
        raise NonFiniteCoordinate("positions contain NaN or Inf")

    n = len(pos)
    if descriptors is None:
        descriptors = np.zeros((n, AGNOSTIC_DIM))
        descriptors[:, 0] = 1.0
    descriptors = np.ascontiguousarray(descriptors, dtype=float)
    norms = np.linalg.norm(descriptors, axis=1, keepdims=True)
    descriptors = descriptors / np.maximum(norms, 1e-30)
    features = (np.zeros((n, feature_dim)) if features is None
                else np.ascontiguousarray(features, dtype=float))
    confidences = (np.ones(n) if confidences is None
                   else np.clip(np.asarray(confidences, dtype=float), 0.0, 1.0))
    scores = (np.ones(n) if scores is None
              else np.clip(np.asarray(scores, dtype=float), 0.0, 1.0))
    for name, arr in (("descriptors", descriptors), ("features", features),
                      ("confidences", confidences), ("scores", scores)):
        if len(arr) != n:
            raise DimensionMismatch(f"{name} length {len(arr)} != point count {n}")

    centroid = pos.mean(axis=0)
    diameter = 2.0 * float(np.max(np.linalg.norm(pos - centroid, axis=1)))
    if diameter <= 0.0:
        diameter = 1.0

    tree = cKDTree(pos)
    spacing = _mean_nn_spacing(pos, tree)
    if neighbor_radius is None:
        neighbor_radius = 2.0 * spacing
    if kernel_width is None:
        kernel_width = 0.9 * spacing
    if density_scale is None:
        density_scale = 2.0 / max(kernel_width, 1e-12)

    return PointField(pos, descriptors, features, confidences, scores,
                      scene_diameter=diameter, neighbor_radius=float(neighbor_radius),
                      kernel_width=float(kernel_width),
                      density_scale=float(density_scale), _tree=tree)


def query_neighbors(field: PointField, x, k, radius):
    """Up to k (index, distance) neighbors of x within radius, nearest first.

    Returns (indices (m,), distances (m,)) with m <= k; both empty when
    nothing lies within the radius.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    d, i = field.tree.query(np.asarray(x, dtype=float), k=min(k, len(field)),
                            distance_upper_bound=radius)
    d = np.atleast_1d(d)
    i = np.atleast_1d(i)
    hit = np.isfinite(d)
    return i[hit], d[hit]


def query_neighbors_batch(field: PointField, xs, k, radius):
    """Vectorised neighbor query: (N, k) index and distance arrays.

    Missing neighbors carry index == len(field) and distance == inf,
    matching the scipy convention.
    """
    kk = min(k, len(field))
    d, i = field.tree.query(np.asarray(xs, dtype=float), k=kk,
                            distance_upper_bound=radius)
    if kk == 1:
        d = d[:, None]
        i = i[:, None]
    return i, d


def filter_by_score(field: PointField, threshold) -> PointField:
    """Keep points with score >= threshold, preserving order; new index built."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("score threshold must be in [0, 1]")
    keep = field.scores >= threshold
    if not np.any(keep):
        raise AllFiltered(f"no point has score >= {threshold}")
    return build_field(field.positions[keep], field.descriptors[keep],
                       field.features[keep], field.confidences[keep],
                       field.scores[keep], neighbor_radius=field.neighbor_radius,
                       kernel_width=field.kernel_width,
                       density_scale=field.density_scale)


@dataclass
class DescriptorMap:
    """Dense per-pixel descriptor map extracted from one image.

    data is (H, W, F_a); optional per-pixel reliability scores are (H, W).
    """

    data: np.ndarray
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise DimensionMismatch("descriptor map must be (H, W, C)")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=float)
            if self.scores.shape != self.data.shape[:2]:
                raise DimensionMismatch("score map must match (H, W)")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


def lift_descriptors(descriptor_map: DescriptorMap, projections):
    """Sample the map at sub-pixel projections and re-normalise to unit length.

    Returns (descriptors (N, F_a), valid (N,)); rows whose projection falls
    outside the map are zero and flagged invalid (excluded from matching).
    """
    proj = np.asarray(projections, dtype=float)
    if proj.ndim == 1:
        proj = proj[None, :]
    values, valid = bilinear_sample_many(descriptor_map.data, proj)
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 1e-30
    values = np.where((valid & nonzero)[:, None], values / np.maximum(norms, 1e-30), 0.0)
    return values, valid & nonzero


def lift_descriptor(descriptor_map: DescriptorMap, projection):
    """Single-projection variant; raises OutOfBounds instead of masking."""
    desc, valid = lift_descriptors(descriptor_map, np.asarray(projection)[None, :])
    if not valid[0]:
        raise OutOfBounds(f"projection {projection} outside descriptor map")
    return desc[0]
