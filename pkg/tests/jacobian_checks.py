"""Central-difference probes for the measurement Jacobians.

A probe is one residual row evaluated at a random (code, pose) state whose
analytic or finite-difference derivative is nonzero (rays lying entirely
outside the ramp have identically zero rows and prove nothing). The
empty-probability ramp has slope discontinuities at ``|s| = sigma``; rows
with any ray sample within ``KINK_GUARD * sigma`` of a discontinuity are
skipped because a central difference straddling the kink does not estimate
the one-sided derivative the analytic Jacobian reports.
"""

import numpy as np

from flowsdf.corpus import make_shape
from flowsdf.decoder import decoder_forward
from flowsdf.geometry import SimilarityPose
from flowsdf.observation_model import build_rays, code_and_jacobian, depth_loss, mask_loss, surface_loss
from flowsdf.observations import NoiseConfig, make_observation_bundle
from flowsdf.render import orbit_cameras

FD_STEP = 1e-5
KINK_GUARD = 1e-3


def fd_jacobian(fn, w, pose, h=FD_STEP):
    cols = []
    for j in range(w.shape[0] + 7):
        d = np.zeros(w.shape[0] + 7)
        d[j] = h
        rp = fn(w + d[:-7], pose.retract(d[-7:]))[1]
        rm = fn(w - d[:-7], pose.retract(-d[-7:]))[1]
        cols.append((rp - rm) / (2 * h))
    return np.stack(cols, axis=1)


def row_errors(J, Jfd):
    """Relative row error, with an absolute floor for rows whose derivative vanishes."""
    num = np.linalg.norm(J - Jfd, axis=1)
    den = np.linalg.norm(Jfd, axis=1)
    return num / np.maximum(den, 1e-6)


def _kink_free(theta, phi, w, pose, rays):
    z, _ = code_and_jacobian(phi, w)
    X = rays.origins[:, None, :] + rays.depths()[:, :, None] * rays.dirs[:, None, :]
    s = decoder_forward(theta, z, pose.apply(X.reshape(-1, 3))).reshape(len(rays), -1)
    gap = np.abs(np.abs(s) - rays.sigma[:, None]) / rays.sigma[:, None]
    return gap.min(axis=1) > KINK_GUARD


def probe_all(theta, phi, n_probes=100, seed=0):
    """Return {term: array of row errors} with at least ``n_probes`` rows per term."""
    rng = np.random.default_rng(seed)
    shape = make_shape(int(rng.integers(1000)))
    bundle = make_observation_bundle(shape, orbit_cameras(3), NoiseConfig(), n_points_per_frame=40, seed=seed)
    errs = {"surface": [], "mask": [], "depth": []}
    state = 0
    while min(len(v) for v in errs.values()) < n_probes:
        state += 1
        if state > 80:
            raise RuntimeError("could not collect enough kink-free probes")
        w = 0.5 * rng.normal(size=16) if phi is not None else 0.1 * rng.normal(size=16)
        pose = SimilarityPose.identity().retract(0.05 * rng.normal(size=7))
        frame = bundle.frames[state % len(bundle.frames)]
        rays = build_rays(frame, pose, ray_budget=60, n_samples=24, seed=state)
        pts = bundle.fused_points[rng.choice(len(bundle.fused_points), 30, replace=False)]
        terms = {
            "surface": (lambda W, P: surface_loss(theta, phi, W, P, pts), None),
            "mask": (lambda W, P, r=rays.mask_rays(): mask_loss(theta, phi, W, P, r), rays.mask_rays()),
            "depth": (lambda W, P, r=rays.depth_rays(): depth_loss(theta, phi, W, P, r), rays.depth_rays()),
        }
        for name, (fn, rb) in terms.items():
            if len(errs[name]) >= n_probes or (rb is not None and len(rb) == 0):
                continue
            _, _, J = fn(w, pose)
            Jfd = fd_jacobian(fn, w, pose)
            e = row_errors(J, Jfd)
            keep = np.maximum(np.linalg.norm(J, axis=1), np.linalg.norm(Jfd, axis=1)) > 1e-8
            if rb is not None:
                keep &= _kink_free(theta, phi, w, pose, rb)
            e = e[keep]
            errs[name].extend(e.tolist())
    return {k: np.array(v) for k, v in errs.items()}
