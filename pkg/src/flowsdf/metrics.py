"""Chamfer distances, gravity-aligned oriented boxes and their 3D IoU, plus table aggregation."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from ._validation import check_points
from .geometry import matrix_to_quat, quat_to_matrix


def _nn_sq(A, B):
    d, _ = cKDTree(B).query(A, k=1)
    return d * d


def chamfer_unidirectional(S1, S2):
    """Mean squared distance from each point of ``S1`` to its nearest neighbour in ``S2``."""
    A = check_points(S1, "S1")
    B = check_points(S2, "S2")
    return float(np.mean(_nn_sq(A, B)))


def chamfer_bidirectional(S1, S2):
    """Sum of both unidirectional terms."""
    A = check_points(S1, "S1")
    B = check_points(S2, "S2")
    return float(np.mean(_nn_sq(A, B)) + np.mean(_nn_sq(B, A)))


@dataclass
class OrientedBox3:
    """Box with a rotation about the up axis (y); ``rotation`` is a unit quaternion (w, x, y, z)."""

    center: np.ndarray
    rotation: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.rotation = q / np.linalg.norm(q)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")

    @classmethod
    def from_yaw(cls, center, yaw, half_extents):
        c, s = np.cos(yaw / 2), np.sin(yaw / 2)
        return cls(center, [c, 0.0, s, 0.0], half_extents)

    @property
    def R(self):
        return quat_to_matrix(self.rotation)

    @property
    def yaw(self):
        R = self.R
        return float(np.arctan2(R[0, 2], R[0, 0]))

    @property
    def volume(self):
        return float(8.0 * np.prod(self.half_extents))

    def contains(self, X, tol=1e-9):
        L = (np.asarray(X, dtype=np.float64) - self.center) @ self.R
        return np.all(np.abs(L) <= self.half_extents + tol, axis=1)

    def footprint(self):
        """Ground-plane (x, z) corners in counter-clockwise order."""
        R = self.R
        hx, _, hz = self.half_extents
        corners = []
        for sx, sz in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
            p = self.center + R @ np.array([sx * hx, 0.0, sz * hz])
            corners.append([p[0], p[2]])
        P = np.array(corners)
        return P if _signed_area(P) > 0 else P[::-1]

    def vertical_range(self):
        c, h = self.center[1], self.half_extents[1]
        return c - h, c + h


def _signed_area(P):
    x, y = P[:, 0], P[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _clip(subject, clipper):
    """Sutherland-Hodgman clipping of a convex polygon by a convex counter-clockwise polygon."""
    out = list(subject)
    n = len(clipper)
    for i in range(n):
        a, b = clipper[i], clipper[(i + 1) % n]
        inp, out = out, []
        if not inp:
            break

        def side(p):
            return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append(p + t * (q - p))
    return np.array(out).reshape(-1, 2)


def iou3d(a, b):
    """Intersection over union of two gravity-aligned boxes (footprint clipping times height overlap)."""
    lo = max(a.vertical_range()[0], b.vertical_range()[0])
    hi = min(a.vertical_range()[1], b.vertical_range()[1])
    h = max(hi - lo, 0.0)
    if h == 0.0:
        return 0.0
    poly = _clip(a.footprint(), b.footprint())
    area = abs(_signed_area(poly)) if len(poly) >= 3 else 0.0
    inter = area * h
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0))


def fit_oriented_box(points, up_axis=(0.0, 1.0, 0.0)):
    """Box with yaw from ground-plane PCA and extents from the min/max in the rotated frame.

    Only ``up_axis = y`` is supported by the box type; other axes are rejected.
    """
    if hasattr(points, "vertices"):
        points = points.vertices
    X = check_points(points)
    up = np.asarray(up_axis, dtype=np.float64)
    if not np.allclose(up / np.linalg.norm(up), [0.0, 1.0, 0.0]):
        raise ValueError("boxes are gravity-aligned with y up")
    G = X[:, [0, 2]] - X[:, [0, 2]].mean(axis=0)
    cov = G.T @ G / len(G)
    evals, evecs = np.linalg.eigh(cov)
    if len(X) < 4 or evals[-1] <= 0:
        raise ValueError("degenerate input: needs a spread of points in the ground plane")
    if evals[0] > 0.9 * evals[-1]:
        # near-isotropic footprint: principal axes are ill-defined, use the tightest rectangle instead
        yaw = _min_area_yaw(X[:, [0, 2]])
    else:
        major = evecs[:, -1]
        yaw = float(np.arctan2(-major[1], major[0]))
    box = OrientedBox3.from_yaw(np.zeros(3), yaw, np.ones(3))
    L = X @ box.R
    lo, hi = L.min(axis=0), L.max(axis=0)
    half = 0.5 * (hi - lo)
    if np.any(half <= 1e-12):
        raise ValueError("degenerate input: points are planar or collinear")
    center = box.R @ (0.5 * (lo + hi))
    return OrientedBox3(center, box.rotation, half)


def _min_area_yaw(P):
    hull = P[ConvexHull(P).vertices]
    edges = np.roll(hull, -1, axis=0) - hull
    best, best_area = 0.0, np.inf
    for ex, ez in edges:
        yaw = float(np.arctan2(-ez, ex))
        c, s = np.cos(yaw), np.sin(yaw)
        u = hull[:, 0] * c - hull[:, 1] * s
        v = hull[:, 0] * s + hull[:, 1] * c
        area = np.ptp(u) * np.ptp(v)
        if area < best_area - 1e-15:
            best, best_area = yaw, area
    # fold to (-45, 45] degrees: a rectangle is symmetric under quarter turns
    return float((best + np.pi / 4) % (np.pi / 2) - np.pi / 4)


def box_from_matrix(center, R, half_extents):
    return OrientedBox3(center, matrix_to_quat(R), half_extents)


def aggregate(values):
    """Median, mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("nothing to aggregate")
    return {"median": float(np.median(v)), "mean": float(np.mean(v)), "std": float(np.std(v))}


__all__ = [
    "chamfer_bidirectional",
    "chamfer_unidirectional",
    "OrientedBox3",
    "fit_oriented_box",
    "iou3d",
    "aggregate",
]
