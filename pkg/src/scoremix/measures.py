"""Weighted point-cloud datasets and nearest-point queries.

A dataset is a finite set of support points with strictly positive weights
summing to one.  Continuous supports (unions of segments) enter through
:func:`sample_segments`, which replaces each segment by a dense row of
cell-center samples, so everything downstream only ever sees the discrete
case.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

# Coincident support points are merged by weight addition below this radius.
MERGE_TOL = 1e-12
# Weight normalization is enforced to this absolute tolerance.
WEIGHT_TOL = 1e-12
# Default tie window for nearest sets, applied to plain distances and scaled
# by max(1, nearest distance).
DEFAULT_TIE_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("points must be a nonempty (n, d) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points contain non-finite entries")
    return pts


def _merge_duplicates(points: np.ndarray, weights: np.ndarray):
    """Merge points coincident within MERGE_TOL, adding their weights.

    Sort-based: coincident points are adjacent after a lexicographic sort,
    which is all the desk-scale inputs need.
    """
    order = np.lexsort(points.T[::-1])
    pts, wts = points[order], weights[order]
    keep_pts, keep_wts = [pts[0]], [wts[0]]
    for p, w in zip(pts[1:], wts[1:]):
        if np.linalg.norm(p - keep_pts[-1]) <= MERGE_TOL:
            keep_wts[-1] = keep_wts[-1] + w
        else:
            keep_pts.append(p)
            keep_wts.append(w)
    return np.array(keep_pts), np.array(keep_wts)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Immutable weighted point cloud.

    Parameters
    ----------
    points : (n, d) array_like
        Support points.  A 1-d array is promoted to shape (n, 1).
    weights : (n,) array_like, optional
        Strictly positive weights.  Defaults to uniform; any positive
        vector is accepted and normalized to sum to one.
    label : str
        Free-form tag carried through serialization.
    """

    points: np.ndarray
    weights: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        pts = _as_points(self.points)
        if self.weights is None:
            wts = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            wts = np.asarray(self.weights, dtype=float)
            if wts.shape != (pts.shape[0],):
                raise ValueError("weights must be one per support point")
            if not np.all(np.isfinite(wts)) or np.any(wts <= 0):
                raise ValueError("weights must be strictly positive and finite")
            wts = wts / wts.sum()
        pts, wts = _merge_duplicates(pts, wts)
        wts = wts / wts.sum()
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def support_radius(self) -> float:
        """Largest Euclidean norm over the support."""
        return float(np.sqrt((self.points**2).sum(axis=1).max()))

    def bounding_box(self):
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True)
class NearestSet:
    """Indices of (near-)minimizing support points for one query."""

    indices: tuple[int, ...]
    distance: float

    @property
    def is_unique(self) -> bool:
        return len(self.indices) == 1


def squared_distances(points: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Squared distances from query rows to every support point.

    `x` may be a single point (d,) or a batch (m, d); the result is (n,)
    or (m, n) accordingly.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    diff = X[:, None, :] - points[None, :, :]
    d2 = np.einsum("mnd,mnd->mn", diff, diff)
    return d2[0] if single else d2


def distance_squared(measure: EmpiricalMeasure, x) -> float:
    """Exact squared distance from x to the support."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(squared_distances(measure.points, x).min())
    return squared_distances(measure.points, x).min(axis=1)


def nearest_set(measure: EmpiricalMeasure, x, tie_tol: float | None = None) -> NearestSet:
    """All support indices within tie_tol of the nearest distance.

    tie_tol is applied to plain distances; the default is DEFAULT_TIE_TOL
    scaled by max(1, nearest distance).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("nearest_set expects a single query point")
    if x.shape[0] != measure.dim:
        raise ValueError(f"query dimension {x.shape[0]} != measure dimension {measure.dim}")
    dist = np.sqrt(squared_distances(measure.points, x))
    dmin = float(dist.min())
    if tie_tol is None:
        tie_tol = DEFAULT_TIE_TOL * max(1.0, dmin)
    idx = np.flatnonzero(dist <= dmin + tie_tol)
    return NearestSet(indices=tuple(int(i) for i in idx), distance=dmin)


def sample_segments(segments, density: float = 200.0, label: str = "") -> EmpiricalMeasure:
    """Discretize a union of segments into a uniform empirical measure.

    Each segment [p, q] is replaced by ceil(len * density) cell-center
    samples weighted by its length, approximating the uniform probability
    measure on the union.  `density` is in points per unit length.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    pts, wts = [], []
    for p, q in segments:
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        length = float(np.linalg.norm(q - p))
        if length == 0.0:
            raise ValueError("degenerate segment with zero length")
        n = max(1, int(math.ceil(length * density)))
        offs = (np.arange(n) + 0.5) / n
        pts.append(p[None, :] + offs[:, None] * (q - p)[None, :])
        wts.append(np.full(n, length / n))
    return EmpiricalMeasure(np.vstack(pts), np.concatenate(wts), label=label)


def load_measure(path, fmt: str | None = None) -> EmpiricalMeasure:
    """Read a measure from CSV or JSON.

    CSV: one point per row, comma-separated, `#` comment lines allowed,
    optional header ``x0,...,x{d-1}[,w]``.  A weight column is recognized
    only through a header whose last name is ``w``; headerless files are
    treated as coordinates only.

    JSON: object with "points", optional "weights", optional "label".
    """
    path = str(path)
    if fmt is None:
        fmt = "json" if path.endswith(".json") else "csv"
    if fmt == "json":
        with open(path) as fh:
            obj = json.load(fh)
        if "points" not in obj:
            raise ValueError(f"{path}: JSON measure needs a 'points' key")
        return EmpiricalMeasure(obj["points"], obj.get("weights"), label=obj.get("label", ""))
    if fmt != "csv":
        raise ValueError(f"unknown measure format {fmt!r}")

    rows, has_weight = [], False
    with open(path) as fh:
        reader = csv.reader(fh)
        for raw in reader:
            if not raw or (raw[0].lstrip().startswith("#")):
                continue
            fields = [f.strip() for f in raw]
            if not rows:
                try:
                    rows.append([float(f) for f in fields])
                    continue
                except ValueError:
                    has_weight = fields[-1] == "w"
                    continue
            rows.append([float(f) for f in fields])
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: inconsistent row widths")
    arr = np.array(rows, dtype=float)
    if has_weight:
        if width < 2:
            raise ValueError(f"{path}: weight column requires at least one coordinate")
        return EmpiricalMeasure(arr[:, :-1], arr[:, -1])
    return EmpiricalMeasure(arr)


def save_measure(measure: EmpiricalMeasure, path, fmt: str | None = None) -> None:
    """Write a measure in one of the formats accepted by load_measure."""
    path = str(path)
    if fmt is None:
        fmt = "json" if path.endswith(".json") else "csv"
    if fmt == "json":
        obj = {
            "points": [[float(v) for v in p] for p in measure.points],
            "weights": [float(w) for w in measure.weights],
            "label": measure.label,
        }
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return
    if fmt != "csv":
        raise ValueError(f"unknown measure format {fmt!r}")
    header = [f"x{i}" for i in range(measure.dim)] + ["w"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, w in zip(measure.points, measure.weights):
            writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])
