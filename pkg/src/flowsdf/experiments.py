"""Experiment protocols, trial synthesis, evaluation and table aggregation.

Three observation protocols are supported:

``complete``
    1000 noiseless surface points per held-out shape, canonical frame.
``partial``
    10 views per shape; each view is its own trial with 50 visible points,
    and an object's score is the mean over its views.
``mask-only``
    3 views of clean silhouettes of a posed object; only the mask term is
    weighted, the pose is initialized from the observed points.

All randomness flows from the master seed through :func:`derive_seed`.
"""

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import derive_seed
from .corpus import CorpusManifest, FamilyConfig, canonical_box, make_shape, sample_surface_points
from .decoder import DecoderTrainConfig, train_decoder
from .flow import FlowTrainConfig, train_flow
from .geometry import SimilarityPose, rotation_about
from .mesh import marching_cubes, sample_mesh_surface
from .metrics import aggregate, box_from_matrix, chamfer_bidirectional, chamfer_unidirectional, fit_oriented_box, iou3d
from .observations import FrameObservation, NoiseConfig, ObservationBundle, make_observation_bundle
from .optimizer import ObjectiveConfig, OptimizationState, decode_shape, init_pose_pca, optimize_first_order, optimize_gn
from .render import look_at, orbit_cameras

logger = logging.getLogger(__name__)

PROTOCOLS = ("complete", "partial", "mask-only")
OPTIMIZERS = ("gn", "first-order")
FLOW_MODES = ("on", "bypass")


@dataclass
class ExperimentConfig:
    master_seed: int = 0
    n_train: int = 96
    n_heldout: int = 30
    family: dict = field(default_factory=lambda: FamilyConfig().to_dict())
    decoder: dict = field(default_factory=lambda: asdict(DecoderTrainConfig(epochs=200, lr_decay_every=66)))
    flow: dict = field(default_factory=lambda: asdict(FlowTrainConfig()))
    objective: dict = field(default_factory=lambda: asdict(ObjectiveConfig(lambda_reg=1e-4, gn_max_iter=200, fo_lr=0.1, fo_decay=0.99, fo_max_iter=1500)))
    # prior weight per observed point, by point protocol; null falls back to objective.lambda_reg
    reg_per_point: dict = field(default_factory=lambda: {"complete": 3e-4, "partial": 1e-3})
    noise: dict = field(default_factory=lambda: asdict(NoiseConfig()))
    protocol: str = "complete"
    optimizer: str = "gn"
    flow_mode: str = "on"
    complete_points: int = 1000
    partial_views: int = 10
    partial_points: int = 50
    mask_views: int = 3
    mask_trials: int = 20
    mask_points: int = 50
    image_size: int = 64
    focal: float = 80.0
    camera_distance: float = 3.0
    mc_resolution: int = 32
    eval_points: int = 2000

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.flow_mode not in FLOW_MODES:
            raise ValueError(f"flow mode must be one of {FLOW_MODES}")
        if self.n_train < 1 or self.n_heldout < 1:
            raise ValueError("corpus splits must be non-empty")
        if isinstance(self.reg_per_point, (int, float)):
            self.reg_per_point = {"complete": float(self.reg_per_point), "partial": float(self.reg_per_point)}
        bad = set(self.reg_per_point) - {"complete", "partial"}
        if bad:
            raise ValueError(f"reg_per_point keys must be point protocols, got {sorted(bad)}")
        if any(v is not None and not v >= 0 for v in self.reg_per_point.values()):
            raise ValueError("reg_per_point values must be non-negative or null")

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        base = cls()
        for key in ("family", "decoder", "flow", "objective", "noise", "reg_per_point"):
            if isinstance(known.get(key), dict):
                merged = dict(getattr(base, key))
                merged.update(known[key])
                known[key] = merged
        return cls(**known)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def family_config(self):
        return FamilyConfig.from_dict(self.family)

    def decoder_config(self):
        d = dict(self.decoder)
        d["seed"] = derive_seed(self.master_seed, "decoder", d.get("seed", 0))
        return DecoderTrainConfig(**d)

    def flow_config(self):
        d = dict(self.flow)
        d["seed"] = derive_seed(self.master_seed, "flow", d.get("seed", 0))
        return FlowTrainConfig(**d)

    def objective_config(self):
        d = dict(self.objective)
        if self.protocol == "mask-only":
            d.update(lambda_surface=0.0, lambda_depth=0.0)
        else:
            # point-based protocols observe the shape in its canonical frame
            d.update(lambda_mask=0.0, lambda_depth=0.0, optimize_pose=False)
            reg = self.reg_per_point.get(self.protocol)
            if reg is not None:
                # the surface term is a mean, so a fixed prior weight per point scales as 1/N
                n = self.complete_points if self.protocol == "complete" else self.partial_points
                d["lambda_reg"] = reg / n
        return ObjectiveConfig(**d)

    def training_key(self):
        """Hash of everything that determines the trained weights."""
        doc = {"master_seed": self.master_seed, "n_train": self.n_train, "n_heldout": self.n_heldout,
               "family": self.family, "decoder": self.decoder, "flow": self.flow}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def run_name(self):
        return f"{self.protocol}-{self.optimizer}-flow-{self.flow_mode}"


def make_manifest(cfg):
    return CorpusManifest.from_master_seed(derive_seed(cfg.master_seed, "corpus"), cfg.n_train, cfg.n_heldout, cfg.family_config())


@dataclass
class TrainedModel:
    theta: object
    codes: np.ndarray
    phi: object
    decoder_history: list
    flow_history: list


def train_models(cfg, manifest, samples=None):
    """Two-stage training: decoder with codes, then the flow on the frozen codes."""
    dec = train_decoder(manifest.train_shapes(), cfg.decoder_config(), samples=samples)
    fl = train_flow(dec.codes, cfg.flow_config())
    return TrainedModel(dec.theta, dec.codes, fl.phi, dec.history, fl.history)


def load_or_train(cfg, cache_dir):
    """Trained model for ``cfg``, reusing weights cached under ``cache_dir`` by :meth:`ExperimentConfig.training_key`."""
    from .weights_io import load_weights, save_weights

    d = os.path.join(cache_dir, cfg.training_key())
    dpath, fpath = os.path.join(d, "decoder.nfwt"), os.path.join(d, "flow.nfwt")
    if os.path.exists(dpath) and os.path.exists(fpath):
        dec, fl = load_weights(dpath), load_weights(fpath)
        return TrainedModel(dec["decoder"], dec["codes"], fl["flow"], [], [])
    model = train_models(cfg, make_manifest(cfg))
    os.makedirs(d, exist_ok=True)
    save_weights(dpath + ".tmp", decoder=model.theta, codes=model.codes)
    save_weights(fpath + ".tmp", flow=model.phi)
    os.replace(dpath + ".tmp", dpath)
    os.replace(fpath + ".tmp", fpath)
    return model


# -- trials --------------------------------------------------------------------------


@dataclass
class Trial:
    object_index: int
    shape_seed: int
    view: int
    bundle: ObservationBundle
    object_pose: SimilarityPose

    @property
    def name(self):
        return f"obj{self.object_index:03d}-view{self.view:02d}"


def _points_frame(points, cfg):
    cam = look_at((0.0, 0.0, cfg.camera_distance), (0.0, 0.0, 0.0), focal=cfg.focal, width=cfg.image_size, height=cfg.image_size)
    mask = np.zeros((cfg.image_size, cfg.image_size), dtype=bool)
    return FrameObservation(cam, mask, np.array([0, 0, -1, -1], dtype=np.int64), points, np.zeros((0, 4)))


def _mask_pose(seed):
    rng = np.random.default_rng(seed)
    yaw = rng.uniform(-np.pi, np.pi)
    t = np.array([rng.uniform(-0.3, 0.3), 0.0, rng.uniform(-0.3, 0.3)])
    # world-to-object: rotate about up and shift
    R = rotation_about([0.0, 1.0, 0.0], yaw)
    return SimilarityPose.from_matrix(R, -R @ t, 1.0)


def make_trials(cfg, manifest):
    """Observation bundles for every trial of the configured protocol, in a fixed order."""
    noise = NoiseConfig(**cfg.noise)
    trials = []
    if cfg.protocol == "mask-only":
        seeds = manifest.heldout_seeds
        for k in range(cfg.mask_trials):
            idx = k % len(seeds)
            shape = make_shape(seeds[idx], manifest.family)
            ts = derive_seed(cfg.master_seed, "mask-only", k)
            pose = _mask_pose(ts)
            center = pose.apply_inverse(np.zeros((1, 3)))[0]
            start = float(np.random.default_rng(ts).uniform(0.0, 360.0))
            cams = orbit_cameras(cfg.mask_views, cfg.camera_distance, 20.0, center, start, focal=cfg.focal,
                                 width=cfg.image_size, height=cfg.image_size)
            clean = NoiseConfig(noise.point_sigma, noise.depth_sigma, 0, noise.bbox_pad)
            b = make_observation_bundle(shape, cams, clean, cfg.mask_points, ts, pose)
            trials.append(Trial(k, seeds[idx], 0, b, pose))
        return trials
    for i, seed in enumerate(manifest.heldout_seeds):
        shape = make_shape(seed, manifest.family)
        ident = SimilarityPose.identity()
        if cfg.protocol == "complete":
            pts = sample_surface_points(shape, cfg.complete_points, derive_seed(cfg.master_seed, "complete", i))
            if noise.point_sigma > 0:
                rng = np.random.default_rng(derive_seed(cfg.master_seed, "complete-noise", i))
                pts = pts + rng.normal(scale=noise.point_sigma, size=pts.shape)
            trials.append(Trial(i, seed, 0, ObservationBundle([_points_frame(pts, cfg)], {"protocol": "complete"}), ident))
        else:
            start = float(np.random.default_rng(derive_seed(cfg.master_seed, "partial-start", i)).uniform(0.0, 360.0))
            cams = orbit_cameras(cfg.partial_views, cfg.camera_distance, 20.0, (0.0, 0.0, 0.0), start, focal=cfg.focal,
                                 width=cfg.image_size, height=cfg.image_size)
            for v, cam in enumerate(cams):
                b = make_observation_bundle(shape, [cam], noise, cfg.partial_points, derive_seed(cfg.master_seed, "partial", i, v))
                trials.append(Trial(i, seed, v, b, ident))
    return trials


# -- optimization and evaluation ---------------------------------------------------------------


@dataclass
class TrialResult:
    name: str
    object_index: int
    shape_seed: int
    view: int
    w: np.ndarray
    pose: SimilarityPose
    status: str
    converged: bool
    iterations: int
    history: list
    mesh: object = None  # world frame
    error: str = ""

    def to_dict(self):
        return {
            "name": self.name, "object_index": self.object_index, "shape_seed": self.shape_seed, "view": self.view,
            "w": [float(x) for x in self.w], "pose": [float(x) for x in self.pose.as_vector()], "status": self.status,
            "converged": bool(self.converged), "iterations": int(self.iterations), "error": self.error,
        }

    @classmethod
    def from_dict(cls, d, mesh=None):
        return cls(d["name"], d["object_index"], d["shape_seed"], d["view"], np.array(d["w"]), SimilarityPose.from_vector(d["pose"]),
                   d["status"], d["converged"], d["iterations"], [], mesh, d.get("error", ""))


def run_trial(model, trial, cfg):
    """Initialize, optimize, decode and mesh one trial. Failures are recorded, not raised."""
    phi = model.phi if cfg.flow_mode == "on" else None
    ocfg = cfg.objective_config()
    try:
        if cfg.protocol == "mask-only":
            pose = init_pose_pca(trial.bundle.fused_points)
        else:
            pose = SimilarityPose.identity()
        init = OptimizationState(np.zeros(16), pose)
        solver = optimize_gn if cfg.optimizer == "gn" else optimize_first_order
        state = solver(model.theta, phi, trial.bundle, ocfg, init)
        field_fn = decode_shape(model.theta, phi, state.w)
        mesh = marching_cubes(field_fn, cfg.mc_resolution, (-1.1, 1.1))
        mesh = mesh.transformed(state.pose.apply_inverse)
        return TrialResult(trial.name, trial.object_index, trial.shape_seed, trial.view, state.w, state.pose, state.status,
                           state.converged, state.iteration, state.history, mesh)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as exc:
        logger.warning("trial %s failed: %s", trial.name, exc)
        return TrialResult(trial.name, trial.object_index, trial.shape_seed, trial.view, np.zeros(16), SimilarityPose.identity(),
                           "failed", False, 0, [], None, str(exc))


def oracle_box(shape, object_pose, seed=0):
    """Gravity-aligned box of the true solid in the world frame (object poses are yaw-only)."""
    lo, hi = canonical_box(shape, seed=seed)
    inv = object_pose.inverse()
    center = inv.apply(((lo + hi) / 2)[None])[0]
    return box_from_matrix(center, inv.R, (hi - lo) / 2 * inv.scale)


def oracle_reference(shape, shape_seed, object_pose, cfg):
    """World-frame oracle surface samples and box used to score every trial of one posed shape."""
    pts = sample_surface_points(shape, cfg.eval_points, derive_seed(cfg.master_seed, "eval", shape_seed))
    return object_pose.apply_inverse(pts), oracle_box(shape, object_pose)


def evaluate_trial(result, shape, object_pose, cfg, reference=None):
    """Chamfer (both variants, reconstruction to oracle first) and box IoU; failures score nan.

    ``reference`` is the ``oracle_reference`` tuple; pass it to reuse the oracle
    samples across views of the same posed shape.
    """
    if result.mesh is None or result.mesh.is_empty:
        return {"chamfer_bi": np.nan, "chamfer_uni": np.nan, "iou": 0.0}
    ref_points, box = reference or oracle_reference(shape, result.shape_seed, object_pose, cfg)
    rec = sample_mesh_surface(result.mesh, cfg.eval_points, derive_seed(cfg.master_seed, "mesh-sample", result.name))
    out = {"chamfer_bi": chamfer_bidirectional(rec, ref_points), "chamfer_uni": chamfer_unidirectional(rec, ref_points)}
    try:
        out["iou"] = iou3d(fit_oriented_box(result.mesh.vertices), box)
    except ValueError:
        out["iou"] = 0.0
    return out


class ReferenceCache:
    """Memoizes ``oracle_reference`` per (shape seed, object pose)."""

    def __init__(self, family, cfg):
        self.family, self.cfg = family, cfg
        self._refs = {}

    def __call__(self, shape_seed, object_pose):
        key = (int(shape_seed), object_pose.as_vector().tobytes())
        if key not in self._refs:
            shape = make_shape(shape_seed, self.family)
            self._refs[key] = (shape, oracle_reference(shape, shape_seed, object_pose, self.cfg))
        return self._refs[key]


def per_object_rows(results, metrics, cfg):
    """Average views of the same object; returns rows sorted by object index."""
    by_obj = {}
    for res, met in zip(results, metrics):
        by_obj.setdefault(res.object_index, {"seed": res.shape_seed, "rows": []})["rows"].append(met)
    rows = []
    for idx in sorted(by_obj):
        ms = by_obj[idx]["rows"]
        row = {"object": idx, "shape_seed": by_obj[idx]["seed"], "method": cfg.run_name, "n_views": len(ms)}
        for key in ("chamfer_bi", "chamfer_uni", "iou"):
            row[key] = float(np.mean([m[key] for m in ms]))
        rows.append(row)
    return rows


def trial_rows(results, metrics, cfg):
    """One row per trial (views kept separate), in trial order."""
    rows = []
    for res, met in zip(results, metrics):
        row = {"trial": res.name, "object": res.object_index, "view": res.view, "method": cfg.run_name,
               "status": res.status, "iterations": res.iterations}
        row.update({k: float(met[k]) for k in ("chamfer_bi", "chamfer_uni", "iou")})
        rows.append(row)
    return rows


def summary_rows(rows, metric, scale=1.0):
    vals = np.array([r[metric] for r in rows], dtype=np.float64) * scale
    finite = vals[np.isfinite(vals)]
    stats = aggregate(finite) if finite.size else {"median": np.nan, "mean": np.nan, "std": np.nan}
    return stats, int(vals.size - finite.size)


def format_float(x):
    return "nan" if not np.isfinite(x) else f"{x:.10g}"


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([format_float(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def run_trials(model, trials, cfg, jobs=1):
    """Optimize every trial; with ``jobs > 1`` trials run in worker processes, results stay in trial order."""
    if jobs <= 1 or len(trials) < 2:
        for trial in trials:
            yield run_trial(model, trial, cfg)
        return
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(run_trial, [model] * len(trials), trials, [cfg] * len(trials))


def run_protocol(model, cfg, manifest=None, trials=None, progress=None, jobs=1):
    """Run every trial, evaluate, and return (results, per-object rows, per-trial metrics)."""
    manifest = manifest or make_manifest(cfg)
    trials = trials if trials is not None else make_trials(cfg, manifest)
    refs = ReferenceCache(manifest.family, cfg)
    results, metrics = [], []
    t0 = time.time()
    for trial, res in zip(trials, run_trials(model, trials, cfg, jobs)):
        shape, reference = refs(trial.shape_seed, trial.object_pose)
        metrics.append(evaluate_trial(res, shape, trial.object_pose, cfg, reference))
        results.append(res)
        if progress:
            progress(trial, res, metrics[-1], time.time() - t0)
    return results, per_object_rows(results, metrics, cfg), metrics


__all__ = [
    "ExperimentConfig",
    "TrainedModel",
    "Trial",
    "TrialResult",
    "make_manifest",
    "train_models",
    "load_or_train",
    "make_trials",
    "run_trial",
    "evaluate_trial",
    "oracle_box",
    "oracle_reference",
    "ReferenceCache",
    "per_object_rows",
    "trial_rows",
    "run_trials",
    "summary_rows",
    "run_protocol",
    "rows_to_csv",
]
