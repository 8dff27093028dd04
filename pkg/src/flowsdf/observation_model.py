"""Measurement residuals (surface, silhouette, rendered depth) with analytical Jacobians.

Every residual is differentiated with respect to a 23-dimensional tangent:
16 code coordinates followed by the 7 pose increments of
:class:`~flowsdf.geometry.SimilarityPose` (rotation 3, translation 3,
log-scale 1). The code coordinates are the normalized code ``w`` when a flow
is supplied, or the raw decoder code ``z`` when ``phi`` is ``None`` (flow
bypass).

Ray samples are placed in world units along each viewing ray; the decoder is
queried at their canonical-frame images ``pose.apply(x)``.
"""

from dataclasses import dataclass

import numpy as np

from ._validation import check_points
from .decoder import decoder_value_and_jacobian
from .flow import flow_value_and_jacobian
from .observations import TAG_BOX, TAG_MASK, TAG_SURFACE

N_POSE = 7
MASK_EPS = 1e-12


def code_and_jacobian(phi, w):
    """Decoder code for the optimized vector and dz/dw (identity when the flow is bypassed)."""
    w = np.asarray(w, dtype=np.float64)
    if phi is None:
        return w.copy(), np.eye(w.shape[0])
    return flow_value_and_jacobian(phi, w)


def _field_and_tangent(theta, phi, w, pose, X):
    """Decoder values at world points ``X`` and their (n, 23) tangent derivatives."""
    z, Jz = code_and_jacobian(phi, w)
    P = pose.apply(X)
    s, ds_dz, ds_dp = decoder_value_and_jacobian(theta, z, P)
    Jp = pose.point_jacobian(X)
    J = np.concatenate([ds_dz @ Jz, np.einsum("ni,nij->nj", ds_dp, Jp)], axis=1)
    return s, J


# -- surface term ------------------------------------------------------------------


def surface_loss(theta, phi, w, pose, points):
    """Mean squared decoded SDF at observed surface points.

    Returns ``(L, r, J)`` with ``r_k = s_k / sqrt(N)`` so that ``L = r @ r``.
    """
    X = check_points(points)
    s, J = _field_and_tangent(theta, phi, w, pose, X)
    c = 1.0 / np.sqrt(X.shape[0])
    r = s * c
    return float(r @ r), r, J * c


# -- ray termination ----------------------------------------------------------------


def empty_prob(s, sigma):
    """Probability that a sample with decoded value ``s`` is empty; linear ramp over [-sigma, sigma]."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return np.clip(0.5 + np.asarray(s, dtype=np.float64) / (2.0 * sigma), 0.0, 1.0)


def empty_prob_grad(s, sigma):
    """de/ds: ``1 / (2 sigma)`` inside the ramp, 0 outside."""
    s = np.asarray(s, dtype=np.float64)
    inside = np.abs(s) <= sigma
    return np.where(inside, 1.0 / (2.0 * sigma), 0.0)


def termination_distribution(e):
    """Probabilities of the ray stopping at each sample, with escape appended as the last entry.

    ``e`` may be one ray (N,) or a batch (R, N); the output has one more
    entry along the last axis and sums to one.
    """
    e = np.asarray(e, dtype=np.float64)
    if np.any((e < 0) | (e > 1)):
        raise ValueError("empty probabilities must lie in [0, 1]")
    C = np.cumprod(e, axis=-1)
    C_prev = np.concatenate([np.ones_like(e[..., :1]), C[..., :-1]], axis=-1)
    return np.concatenate([C_prev * (1.0 - e), C[..., -1:]], axis=-1)


def rendered_depth(d, p, d_escape):
    """Expected depth under the termination distribution ``p`` (length N + 1)."""
    d = np.asarray(d, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != d.shape[-1] + 1:
        raise ValueError("p must have one more entry than d")
    return np.sum(p[..., :-1] * d, axis=-1) + p[..., -1] * np.asarray(d_escape, dtype=np.float64)


def escape_prob_and_grad(e):
    """P(escape) = prod e and its gradient, via prefix and suffix products (no division)."""
    pre = np.cumprod(np.concatenate([np.ones_like(e[..., :1]), e[..., :-1]], axis=-1), axis=-1)
    suf = np.cumprod(np.concatenate([np.ones_like(e[..., :1]), e[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return pre[..., -1] * e[..., -1], pre * suf


def rendered_depth_and_grad(e, d, d_escape):
    """Rendered depth and d(depth)/de.

    Writing ``C_i = prod_{j<=i} e_j``, the depth is
    ``d_1 + sum_i C_i (d_{i+1} - d_i)`` with ``d_{N+1} = d_escape``; the
    gradient accumulates backwards as ``a_k = g_k + e_{k+1} a_{k+1}`` and
    ``d/de_k = C_{k-1} a_k``.
    """
    d_ext = np.concatenate([d, np.asarray(d_escape, dtype=np.float64)[..., None]], axis=-1)
    g = np.diff(d_ext, axis=-1)
    C = np.cumprod(e, axis=-1)
    D = d[..., 0] + np.sum(C * g, axis=-1)
    a = np.empty_like(e)
    a[..., -1] = g[..., -1]
    for k in range(e.shape[-1] - 2, -1, -1):
        a[..., k] = g[..., k] + e[..., k + 1] * a[..., k + 1]
    C_prev = np.concatenate([np.ones_like(e[..., :1]), C[..., :-1]], axis=-1)
    return D, C_prev * a


# -- rays ----------------------------------------------------------------------------


@dataclass
class RayBundle:
    """Pixel rays with their sampling interval in world units.

    ``tag`` marks the pixel set: mask interior, box-but-off-mask, or measured
    surface depth. ``m`` is 0 for rays through the mask and 1 otherwise.
    ``d_u`` is the target depth (``d_max`` for box pixels, nan when absent).
    ``sigma`` is the ramp half-width in canonical units, fixed when the
    bundle is built.
    """

    origins: np.ndarray
    dirs: np.ndarray
    d_min: np.ndarray
    d_max: np.ndarray
    n_samples: int
    m: np.ndarray
    tag: np.ndarray
    d_u: np.ndarray
    sigma: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least two samples per ray")
        if np.any(self.d_min >= self.d_max):
            raise ValueError("every ray needs d_min < d_max")

    def __len__(self):
        return len(self.d_min)

    @property
    def step(self):
        return (self.d_max - self.d_min) / (self.n_samples - 1)

    def depths(self):
        i = np.arange(self.n_samples)
        return self.d_min[:, None] + i[None, :] * self.step[:, None]

    def subset(self, idx):
        idx = np.asarray(idx)
        return RayBundle(
            self.origins[idx], self.dirs[idx], self.d_min[idx], self.d_max[idx], self.n_samples,
            self.m[idx], self.tag[idx], self.d_u[idx], self.sigma[idx], self.pixels[idx],
        )

    def mask_rays(self):
        return self.subset(np.nonzero((self.tag == TAG_MASK) | (self.tag == TAG_BOX))[0])

    def depth_rays(self):
        return self.subset(np.nonzero((self.tag == TAG_SURFACE) | (self.tag == TAG_BOX))[0])


def ray_box_interval(origins, dirs, pose, halfwidth=1.0):
    """Entry and exit distances of world rays through the canonical cube, mapped by ``pose``."""
    o = pose.apply(origins)
    v = pose.scale * (dirs @ pose.R.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / v
        t1 = (-halfwidth - o) * inv
        t2 = (halfwidth - o) * inv
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # axis-parallel rays outside the slab never enter
    par = v == 0
    outside = par & (np.abs(o) > halfwidth)
    lo = np.where(par, -np.inf, lo)
    hi = np.where(par, np.inf, hi)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    t_far = np.where(outside.any(axis=1), -np.inf, t_far)
    return t_near, t_far


def build_rays(frame, pose, bbox2d=None, ray_budget=128, n_samples=32, seed=0, box_halfwidth=1.0, min_depth=1e-6):
    """Sample pixel rays for the mask and depth terms of one frame.

    Up to ``ray_budget`` pixels are drawn from the mask and off-mask box sets
    in proportion to their sizes; every measured-depth pixel is added on top.
    Sampling intervals come from the canonical cube under ``pose``. Rays that
    miss the cube are skipped.
    """
    if ray_budget < 1:
        raise ValueError("ray_budget must be at least 1")
    rng = np.random.default_rng(seed)
    if bbox2d is None:
        bbox2d = frame.bbox2d
    u0, v0, u1, v1 = [int(x) for x in bbox2d]
    in_box = np.zeros_like(frame.mask, dtype=bool)
    in_box[max(v0, 0) : v1 + 1, max(u0, 0) : u1 + 1] = True
    vm, um = np.nonzero(frame.mask)
    vb, ub = np.nonzero(in_box & ~frame.mask)
    n_m, n_b = len(um), len(ub)
    total = n_m + n_b
    if ray_budget >= total:
        take_m, take_b = np.arange(n_m), np.arange(n_b)
    else:
        k_m = int(round(ray_budget * n_m / total))
        k_b = ray_budget - k_m
        take_m = np.sort(rng.choice(n_m, size=k_m, replace=False))
        take_b = np.sort(rng.choice(n_b, size=k_b, replace=False))

    px_s = frame.depth_pixels[frame.depth_pixels[:, 3] == TAG_SURFACE] if len(frame.depth_pixels) else np.zeros((0, 4))
    u = np.concatenate([um[take_m], ub[take_b], px_s[:, 0]]).astype(np.float64)
    v = np.concatenate([vm[take_m], vb[take_b], px_s[:, 1]]).astype(np.float64)
    tag = np.concatenate([np.full(len(take_m), TAG_MASK), np.full(len(take_b), TAG_BOX), np.full(len(px_s), TAG_SURFACE)]).astype(np.int64)
    d_meas = np.concatenate([np.full(len(take_m) + len(take_b), np.nan), px_s[:, 2]])

    origins, dirs = frame.camera.pixel_rays(u, v)
    t_near, t_far = ray_box_interval(origins, dirs, pose, box_halfwidth)
    t_near = np.maximum(t_near, min_depth)
    keep = t_far > t_near
    d_min, d_max = t_near[keep], t_far[keep]
    tag = tag[keep]
    d_u = np.where(tag == TAG_BOX, d_max, d_meas[keep])
    m = (tag == TAG_BOX).astype(np.int64)
    step = (d_max - d_min) / (n_samples - 1)
    return RayBundle(
        origins[keep], dirs[keep], d_min, d_max, int(n_samples), m, tag, d_u, step * pose.scale,
        np.stack([u[keep], v[keep]], axis=-1),
    )


def _ray_field(theta, phi, w, pose, rays):
    """Empty probabilities along every ray and de/d(tangent), shapes (R, N) and (R, N, 23)."""
    R, N = len(rays), rays.n_samples
    X = rays.origins[:, None, :] + rays.depths()[:, :, None] * rays.dirs[:, None, :]
    s, J = _field_and_tangent(theta, phi, w, pose, X.reshape(-1, 3))
    s = s.reshape(R, N)
    sig = rays.sigma[:, None]
    e = empty_prob(s, sig)
    de = empty_prob_grad(s, sig)
    return e, de[:, :, None] * J.reshape(R, N, -1)


def mask_costs(e, m):
    """Per-ray silhouette cost: P(escape) through the mask, 1 - P(escape) elsewhere."""
    P, dP = escape_prob_and_grad(e)
    sign = np.where(m == 0, 1.0, -1.0)
    cost = np.where(m == 0, P, 1.0 - P)
    return np.clip(cost, 0.0, 1.0), sign[:, None] * dP


def mask_loss(theta, phi, w, pose, rays, sigma=None):
    """Mean silhouette cost over rays through mask and off-mask box pixels.

    Residuals are ``sqrt((cost + 1e-12) / R)``; ``L`` is the exact mean cost.
    ``sigma`` overrides the per-ray ramp width stored in the bundle.
    """
    if len(rays) == 0:
        raise ValueError("mask loss needs at least one ray")
    if sigma is not None:
        rays = RayBundle(rays.origins, rays.dirs, rays.d_min, rays.d_max, rays.n_samples, rays.m, rays.tag, rays.d_u,
                         np.broadcast_to(np.asarray(sigma, dtype=np.float64), rays.d_min.shape).copy(), rays.pixels)
    e, de = _ray_field(theta, phi, w, pose, rays)
    cost, dcost_de = mask_costs(e, rays.m)
    R = len(rays)
    r = np.sqrt((cost + MASK_EPS) / R)
    dcost = np.einsum("rn,rnj->rj", dcost_de, de)
    J = dcost / (2.0 * R * r[:, None])
    return float(np.mean(cost)), r, J


def depth_loss(theta, phi, w, pose, rays, sigma=None):
    """Squared rendered-depth errors over measured-depth and off-mask box rays.

    ``r = (d_u - depth) / sqrt(R)``; the escape depth of each ray is its ``d_max``.
    """
    if len(rays) == 0:
        raise ValueError("depth loss needs at least one ray")
    if np.any(np.isnan(rays.d_u)):
        raise ValueError("every depth ray needs a target depth")
    if sigma is not None:
        rays = RayBundle(rays.origins, rays.dirs, rays.d_min, rays.d_max, rays.n_samples, rays.m, rays.tag, rays.d_u,
                         np.broadcast_to(np.asarray(sigma, dtype=np.float64), rays.d_min.shape).copy(), rays.pixels)
    e, de = _ray_field(theta, phi, w, pose, rays)
    D, dD_de = rendered_depth_and_grad(e, rays.depths(), rays.d_max)
    c = 1.0 / np.sqrt(len(rays))
    r = (rays.d_u - D) * c
    J = -c * np.einsum("rn,rnj->rj", dD_de, de)
    return float(r @ r), r, J


__all__ = [
    "code_and_jacobian",
    "surface_loss",
    "empty_prob",
    "termination_distribution",
    "rendered_depth",
    "mask_loss",
    "depth_loss",
    "RayBundle",
    "build_rays",
    "ray_box_interval",
]
