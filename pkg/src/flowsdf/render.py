"""Pinhole cameras and sphere-traced mask/depth rendering of oracle shapes.

Depth throughout the package is the distance along the unit viewing ray,
not the camera-frame z coordinate.
"""

from dataclasses import dataclass, field

import numpy as np

from .corpus import oracle_sdf
from .geometry import SimilarityPose

HIT_EPS = 1e-4
MAX_STEPS = 256
MISS_DEPTH = np.inf


@dataclass
class CameraModel:
    """Pinhole camera; ``R``, ``t`` map world points to camera coordinates (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.fx, self.fy, self.cx, self.cy = map(float, (self.fx, self.fy, self.cx, self.cy))
        self.width, self.height = int(self.width), int(self.height)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self):
        return -self.R.T @ self.t

    def pixel_rays(self, u, v):
        """World-frame ray origins and unit directions through pixel coordinates."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        dirs = d @ self.R
        origins = np.broadcast_to(self.center, dirs.shape).copy()
        return origins, dirs

    def project(self, X):
        """World points to pixel coordinates (u, v) and camera-frame z."""
        Xc = np.asarray(X, dtype=np.float64) @ self.R.T + self.t
        u = self.fx * Xc[:, 0] / Xc[:, 2] + self.cx
        v = self.fy * Xc[:, 1] / Xc[:, 2] + self.cy
        return np.stack([u, v], axis=-1), Xc[:, 2]

    def to_array(self):
        return np.concatenate([[self.fx, self.fy, self.cx, self.cy, self.width, self.height], self.R.ravel(), self.t])

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        return cls(a[0], a[1], a[2], a[3], int(a[4]), int(a[5]), a[6:15].reshape(3, 3), a[15:18])


def look_at(eye, target, up=(0.0, 1.0, 0.0), focal=80.0, width=64, height=64):
    """Camera at ``eye`` looking at ``target`` with world ``up`` pointing to the top of the image."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise ValueError("view direction is parallel to up")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return CameraModel(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height, R, -R @ eye)


def orbit_cameras(n_views, distance=3.0, elevation_deg=20.0, target=(0.0, 0.0, 0.0), start_deg=0.0, **kw):
    """``n_views`` cameras evenly spaced in azimuth around ``target`` (y up)."""
    cams = []
    el = np.deg2rad(elevation_deg)
    for k in range(n_views):
        az = np.deg2rad(start_deg) + 2 * np.pi * k / n_views
        eye = np.asarray(target) + distance * np.array([np.cos(el) * np.cos(az), np.sin(el), np.cos(el) * np.sin(az)])
        cams.append(look_at(eye, target, **kw))
    return cams


def world_sdf(shape, X, object_pose=None):
    """Oracle SDF in world units for a shape placed by a world-to-object similarity."""
    if object_pose is None:
        return oracle_sdf(shape, X)
    return oracle_sdf(shape, object_pose.apply(X)) / object_pose.scale


def _bounding_ball(shape, object_pose):
    r = shape.bounding_radius() * 1.02 + 1e-3
    if object_pose is None:
        return np.zeros(3), r
    return object_pose.apply_inverse(np.zeros((1, 3)))[0], r / object_pose.scale


def sphere_trace(shape, origins, dirs, object_pose=None, hit_eps=HIT_EPS, max_steps=MAX_STEPS):
    """Vectorized sphere tracing; returns (hit mask, ray length at hit, inf for misses)."""
    c, r = _bounding_ball(shape, object_pose)
    oc = origins - c
    b = np.sum(oc * dirs, axis=1)
    disc = b * b - (np.sum(oc * oc, axis=1) - r * r)
    ok = disc > 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_near = np.maximum(-b - sq, 0.0)
    t_far = -b + sq
    t = t_near.copy()
    hit = np.zeros(len(origins), dtype=bool)
    active = ok & (t_far > 0)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        s = world_sdf(shape, origins[idx] + t[idx, None] * dirs[idx], object_pose)
        now_hit = s < hit_eps
        hit[idx[now_hit]] = True
        t[idx[~now_hit]] += s[~now_hit]
        escaped = t[idx] > t_far[idx]
        active[idx[now_hit | escaped]] = False
    depth = np.where(hit, t, MISS_DEPTH)
    return hit, depth


@dataclass
class RenderResult:
    mask: np.ndarray
    depth: np.ndarray
    empty: bool


def render_view(shape, camera, object_pose=None, hit_eps=HIT_EPS, max_steps=MAX_STEPS):
    """Render a binary silhouette and a ray-length depth image (misses carry ``inf``).

    A shape completely outside the frustum gives an empty mask and
    ``result.empty`` set; that is not an error.
    """
    vv, uu = np.mgrid[0 : camera.height, 0 : camera.width]
    origins, dirs = camera.pixel_rays(uu.ravel().astype(np.float64), vv.ravel().astype(np.float64))
    hit, depth = sphere_trace(shape, origins, dirs, object_pose, hit_eps, max_steps)
    mask = hit.reshape(camera.height, camera.width)
    return RenderResult(mask, depth.reshape(camera.height, camera.width), not mask.any())


def backproject(camera, u, v, depth):
    origins, dirs = camera.pixel_rays(u, v)
    return origins + np.asarray(depth)[..., None] * dirs


__all__ = [
    "CameraModel",
    "look_at",
    "orbit_cameras",
    "render_view",
    "sphere_trace",
    "backproject",
    "world_sdf",
    "RenderResult",
    "SimilarityPose",
]
