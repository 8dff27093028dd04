"""Joint code and pose optimization over multi-frame observations.

The objective stacks weighted residuals of the surface, silhouette and
rendered-depth terms plus a quadratic prior on the code. The silhouette and
depth terms are averaged over the frames that contribute rays. Two solvers
share it: damped Gauss-Newton on the stacked Jacobian, and an Adam baseline
on the gradient.
"""

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_points
from .decoder import decoder_forward
from .flow import FlowInversionError, flow_forward
from .geometry import SimilarityPose
from .observation_model import build_rays, depth_loss, mask_loss, surface_loss

logger = logging.getLogger(__name__)

CODE_DIM = 16
TANGENT_DIM = CODE_DIM + 7
# failures of a trial iterate (saturated flow, singular Jacobian) count as rejected steps
_TRIAL_ERRORS = (np.linalg.LinAlgError, FlowInversionError, FloatingPointError, ValueError)


@dataclass
class ObjectiveConfig:
    lambda_surface: float = 1.0
    lambda_mask: float = 0.5
    lambda_depth: float = 0.5
    lambda_reg: float = 1e-2
    optimize_pose: bool = True
    ray_budget: int = 128
    n_samples: int = 32
    gn_max_iter: int = 50
    mu0: float = 1e-4
    mu_up: float = 10.0
    mu_down: float = 0.5
    mu_max: float = 1e8
    step_tol: float = 1e-5
    fo_lr: float = 1e-2
    fo_decay: float = 1.0  # learning-rate factor applied every iteration
    fo_max_iter: int = 500
    seed: int = 0

    def __post_init__(self):
        lams = (self.lambda_surface, self.lambda_mask, self.lambda_depth, self.lambda_reg)
        if any(l < 0 or not np.isfinite(l) for l in lams):
            raise ValueError("objective weights must be finite and non-negative")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        if not 0.0 < self.fo_decay <= 1.0:
            raise ValueError("fo_decay must lie in (0, 1]")

    def require_observations(self):
        """Raise unless some measurement term carries weight (the prior alone fixes w = 0)."""
        if max(self.lambda_surface, self.lambda_mask, self.lambda_depth) <= 0:
            raise ValueError("at least one of the surface, mask and depth weights must be positive")

    @classmethod
    def mask_only(cls, **kw):
        kw.update(lambda_surface=0.0, lambda_depth=0.0)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizationState:
    w: np.ndarray = field(default_factory=lambda: np.zeros(CODE_DIM))
    pose: SimilarityPose = field(default_factory=SimilarityPose.identity)
    iteration: int = 0
    history: list = field(default_factory=list)
    converged: bool = False
    status: str = "initialized"

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1).copy()
        if not np.all(np.isfinite(self.w)):
            raise ValueError("w must be finite")

    def copy(self):
        return OptimizationState(self.w.copy(), SimilarityPose.from_vector(self.pose.as_vector()), self.iteration,
                                 [dict(h) for h in self.history], self.converged, self.status)

    def report_lines(self):
        """One JSON record per logged iteration."""
        return [json.dumps(h, sort_keys=True) for h in self.history]


# -- pose initialization -----------------------------------------------------


def _up_frame(up_axis):
    """Rotation taking world vectors to a frame whose y axis is ``up_axis``."""
    up = np.asarray(up_axis, dtype=np.float64)
    up = up / np.linalg.norm(up)
    ref = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
    a = ref - (ref @ up) * up
    a /= np.linalg.norm(a)
    b = np.cross(a, up)
    return np.stack([a, up, b])


def init_pose_pca(points, up_axis=(0.0, 1.0, 0.0), canonical_center=(0.0, 0.0, 0.0), canonical_half_length=0.9):
    """World-to-object similarity from a point cloud.

    The centroid goes to ``canonical_center``; the dominant principal
    direction in the ground plane becomes the canonical x axis (heading known
    up to the four-way box symmetry); the half-extent along it is scaled to
    ``canonical_half_length``; ``up_axis`` becomes canonical y.
    """
    X = check_points(points)
    if X.shape[0] < 4:
        raise ValueError("PCA pose initialization needs at least 4 points")
    c = X.mean(axis=0)
    D = X - c
    if np.linalg.matrix_rank(D, tol=1e-9 * max(np.abs(D).max(), 1e-300)) < 2:
        raise ValueError("point cloud is degenerate (rank < 2); provide more points")
    U = _up_frame(up_axis)
    G = D @ U.T  # columns: a, up, b
    ground = G[:, [0, 2]]
    cov = ground.T @ ground / len(ground)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-12 * max(evals.sum(), 1e-300):
        raise ValueError("ground-plane covariance is rank deficient; provide more points")
    major = evecs[:, -1]
    x_axis = major[0] * U[0] + major[1] * U[2]
    R = np.stack([x_axis, U[1], np.cross(x_axis, U[1])])
    along = D @ R[0]
    half = 0.5 * (along.max() - along.min())
    if half <= 0:
        raise ValueError("zero extent along the principal direction")
    scale = canonical_half_length / half
    t = np.asarray(canonical_center, dtype=np.float64) - scale * (R @ c)
    return SimilarityPose.from_matrix(R, t, scale)


# -- objective -------------------------------------------------------------------------


def build_frame_rays(bundle, pose, cfg):
    """Ray bundles for every frame at ``pose``; frames with no rays give ``None``."""
    out = []
    for qi, frame in enumerate(bundle.frames):
        if not frame.mask.any():
            out.append(None)
            continue
        rays = build_rays(frame, pose, None, cfg.ray_budget, cfg.n_samples, seed=cfg.seed * 1000003 + qi)
        out.append(rays if len(rays) else None)
    return out


def total_objective(theta, phi, state, bundle, cfg, rays=None):
    """Weighted stacked residuals ``r``, Jacobian ``J`` (rows x 23) and per-term values.

    ``L = r @ r``. Silhouette and depth terms are averaged over the frames
    that contribute rays. ``rays`` holds per-frame bundles from
    :func:`build_frame_rays`; they are built at ``state.pose`` when omitted.
    """
    w, pose = state.w, state.pose
    blocks_r, blocks_J = [], []
    terms = {"surface": 0.0, "mask": 0.0, "depth": 0.0, "reg": 0.0}
    if cfg.lambda_surface > 0:
        pts = bundle.fused_points
        if len(pts):
            L, r, J = surface_loss(theta, phi, w, pose, pts)
            c = np.sqrt(cfg.lambda_surface)
            terms["surface"] = L
            blocks_r.append(c * r)
            blocks_J.append(c * J)
    if cfg.lambda_mask > 0 or cfg.lambda_depth > 0:
        if rays is None:
            rays = build_frame_rays(bundle, pose, cfg)
        if cfg.lambda_mask > 0:
            per = [rb.mask_rays() for rb in rays if rb is not None]
            per = [rb for rb in per if len(rb)]
            for rb in per:
                L, r, J = mask_loss(theta, phi, w, pose, rb)
                c = np.sqrt(cfg.lambda_mask / len(per))
                terms["mask"] += L / len(per)
                blocks_r.append(c * r)
                blocks_J.append(c * J)
        if cfg.lambda_depth > 0:
            per = [rb.depth_rays() for rb in rays if rb is not None]
            per = [rb for rb in per if len(rb)]
            for rb in per:
                L, r, J = depth_loss(theta, phi, w, pose, rb)
                c = np.sqrt(cfg.lambda_depth / len(per))
                terms["depth"] += L / len(per)
                blocks_r.append(c * r)
                blocks_J.append(c * J)
    c = np.sqrt(cfg.lambda_reg)
    Jreg = np.zeros((CODE_DIM, TANGENT_DIM))
    Jreg[:, :CODE_DIM] = c * np.eye(CODE_DIM)
    blocks_r.append(c * w)
    blocks_J.append(Jreg)
    terms["reg"] = float(w @ w)
    r = np.concatenate(blocks_r)
    J = np.concatenate(blocks_J, axis=0)
    return float(r @ r), r, J, terms


def _active(cfg):
    return TANGENT_DIM if cfg.optimize_pose else CODE_DIM


def _move(state, delta, cfg):
    new = state.copy()
    new.w = state.w + delta[:CODE_DIM]
    if cfg.optimize_pose:
        new.pose = state.pose.retract(delta[CODE_DIM:])
    return new


def _record(state, L, terms, step_norm, mu, accepted, kind):
    rec = {"iteration": state.iteration, "loss": L, "step_norm": step_norm, "accepted": accepted, "optimizer": kind}
    rec.update({f"loss_{k}": v for k, v in terms.items()})
    if mu is not None:
        rec["damping"] = mu
    state.history.append(rec)


def optimize_gn(theta, phi, bundle, cfg, init=None, rays=None):
    """Levenberg-damped Gauss-Newton on the stacked residuals.

    Rays are built once at the initial pose. Rejected steps raise the
    damping and leave the iterate unchanged, so accepted losses never
    increase.
    """
    state = (init or OptimizationState()).copy()
    if rays is None and (cfg.lambda_mask > 0 or cfg.lambda_depth > 0):
        rays = build_frame_rays(bundle, state.pose, cfg)
    n = _active(cfg)
    mu = cfg.mu0
    L, r, J, terms = total_objective(theta, phi, state, bundle, cfg, rays)
    _record(state, L, terms, 0.0, mu, True, "gn")
    state.status = "max_iter"
    for _ in range(cfg.gn_max_iter):
        Ja = J[:, :n]
        A = Ja.T @ Ja
        g = Ja.T @ r
        try:
            step = np.linalg.solve(A + mu * np.eye(n), -g)
        except np.linalg.LinAlgError:
            step = None
        state.iteration += 1
        if step is None or not np.all(np.isfinite(step)):
            mu *= cfg.mu_up
            if mu > cfg.mu_max:
                state.status = "damping_overflow"
                break
            continue
        delta = np.zeros(TANGENT_DIM)
        delta[:n] = step
        snorm = float(np.linalg.norm(step))
        if snorm < cfg.step_tol:
            state.converged = True
            state.status = "step_tol"
            _record(state, L, terms, snorm, mu, False, "gn")
            break
        trial = _move(state, delta, cfg)
        try:
            L_new, r_new, J_new, terms_new = total_objective(theta, phi, trial, bundle, cfg, rays)
        except _TRIAL_ERRORS as exc:
            logger.debug("trial step rejected: %s", exc)
            L_new = np.inf
        if np.isfinite(L_new) and L_new <= L:
            trial.iteration, trial.history = state.iteration, state.history
            state = trial
            L, r, J, terms = L_new, r_new, J_new, terms_new
            mu = max(mu * cfg.mu_down, 1e-12)
            _record(state, L, terms, snorm, mu, True, "gn")
        else:
            mu *= cfg.mu_up
            _record(state, L, terms, snorm, mu, False, "gn")
            if mu > cfg.mu_max:
                state.status = "damping_overflow"
                break
    return state


def optimize_first_order(theta, phi, bundle, cfg, init=None, rays=None):
    """Adam on the objective gradient ``2 J^T r`` over the same tangent.

    The learning rate decays by ``fo_decay`` every iteration and halves
    whenever the loss goes up; the run converges once a step is shorter than
    ``step_tol``. Adam's normalized steps do not shrink at a fixed learning
    rate, so a decay below 1 is what lets the step tolerance trigger.
    """
    state = (init or OptimizationState()).copy()
    if rays is None and (cfg.lambda_mask > 0 or cfg.lambda_depth > 0):
        rays = build_frame_rays(bundle, state.pose, cfg)
    n = _active(cfg)
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.fo_lr
    L, r, J, terms = total_objective(theta, phi, state, bundle, cfg, rays)
    _record(state, L, terms, 0.0, None, True, "first_order")
    state.status = "max_iter"
    for k in range(1, cfg.fo_max_iter + 1):
        g = 2.0 * J[:, :n].T @ r
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = -lr * (m / (1 - b1**k)) / (np.sqrt(v / (1 - b2**k)) + eps)
        snorm = float(np.linalg.norm(step))
        state.iteration = k
        if snorm < cfg.step_tol:
            state.converged = True
            state.status = "step_tol"
            break
        delta = np.zeros(TANGENT_DIM)
        delta[:n] = step
        new = _move(state, delta, cfg)
        new.iteration, new.history = state.iteration, state.history
        try:
            L_new, r, J, terms = total_objective(theta, phi, new, bundle, cfg, rays)
        except _TRIAL_ERRORS:
            L_new = np.inf
        if not np.isfinite(L_new):
            state.status = "diverged"
            break
        lr *= cfg.fo_decay
        if L_new > L:
            lr *= 0.5
        state, L = new, L_new
        _record(state, L, terms, snorm, None, True, "first_order")
    return state


def decode_shape(theta, phi, w):
    """Field ``p -> s`` of the decoder at the code generated from ``w`` (``phi=None``: ``w`` is the code)."""
    z = np.asarray(w, dtype=np.float64).copy() if phi is None else flow_forward(phi, w)

    def field(p):
        return decoder_forward(theta, z, p)

    field.code = z
    return field


class ShapeOptimizer(BaseEstimator):
    """Estimator wrapper: ``fit(bundle)`` optimizes the code (and pose); ``predict`` evaluates world-frame SDF."""

    def __init__(self, theta=None, phi=None, optimizer="gn", config=None, init_pose="pca", up_axis=(0.0, 1.0, 0.0)):
        self.theta = theta
        self.phi = phi
        self.optimizer = optimizer
        self.config = config
        self.init_pose = init_pose
        self.up_axis = up_axis

    def fit(self, bundle, y=None):
        if self.theta is None:
            raise ValueError("a trained decoder is required")
        cfg = self.config or ObjectiveConfig()
        cfg.require_observations()
        if self.init_pose == "pca":
            pose = init_pose_pca(bundle.fused_points, self.up_axis)
        elif isinstance(self.init_pose, SimilarityPose):
            pose = self.init_pose
        else:
            pose = SimilarityPose.identity()
        init = OptimizationState(np.zeros(CODE_DIM), pose)
        if self.optimizer == "gn":
            self.state_ = optimize_gn(self.theta, self.phi, bundle, cfg, init)
        elif self.optimizer == "first-order":
            self.state_ = optimize_first_order(self.theta, self.phi, bundle, cfg, init)
        else:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.w_ = self.state_.w
        self.pose_ = self.state_.pose
        self.field_ = decode_shape(self.theta, self.phi, self.w_)
        return self

    def predict(self, points):
        """SDF in world units at world points."""
        X = check_points(points)
        return self.field_(self.pose_.apply(X)) / self.pose_.scale


__all__ = [
    "ObjectiveConfig",
    "OptimizationState",
    "init_pose_pca",
    "total_objective",
    "build_frame_rays",
    "optimize_gn",
    "optimize_first_order",
    "decode_shape",
    "ShapeOptimizer",
]
