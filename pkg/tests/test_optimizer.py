import json

import numpy as np
import pytest

from flowsdf.decoder import decoder_forward, decoder_jacobian
from flowsdf.flow import flow_forward
from flowsdf.geometry import SimilarityPose, rotation_about
from flowsdf.observations import FrameObservation, NoiseConfig, ObservationBundle, make_observation_bundle
from flowsdf.optimizer import (
    ObjectiveConfig,
    OptimizationState,
    ShapeOptimizer,
    build_frame_rays,
    decode_shape,
    init_pose_pca,
    optimize_first_order,
    optimize_gn,
    total_objective,
)
from flowsdf.render import look_at


def level_set_points(theta, z, n=200, seed=0, iters=30):
    """Project random points onto the decoder's zero level set with Newton steps."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    p = 0.4 * d / np.linalg.norm(d, axis=1, keepdims=True)
    for _ in range(iters):
        s = decoder_forward(theta, z, p)
        _, g = decoder_jacobian(theta, z, p)
        p = p - (s / np.sum(g * g, axis=1))[:, None] * g
    assert np.abs(decoder_forward(theta, z, p)).max() < 1e-10
    return p


def points_bundle(P):
    return ObservationBundle([FrameObservation(None, np.zeros((1, 1), bool), np.array([0, 0, -1, -1]), P, np.zeros((0, 4)))])


@pytest.fixture(scope="module")
def target(small_decoder):
    z_star = 0.3 * np.random.default_rng(7).normal(size=16)
    return z_star, level_set_points(small_decoder, z_star)


POINTS_ONLY = dict(lambda_mask=0.0, lambda_depth=0.0, optimize_pose=False, lambda_reg=0.0)


def accepted_losses(state):
    return [h["loss"] for h in state.history if h["accepted"]]


def test_gn_fits_a_reachable_shape(small_decoder, target):
    _, P = target
    cfg = ObjectiveConfig(**POINTS_ONLY)
    st = optimize_gn(small_decoder, None, points_bundle(P), cfg)
    assert st.converged and st.status == "step_tol"
    assert st.history[-1]["loss_surface"] < 1e-8
    L = accepted_losses(st)
    assert all(b <= a for a, b in zip(L, L[1:]))


def test_gn_with_flow_fits_a_reachable_shape(small_decoder, small_flow, target):
    _, P = target
    cfg = ObjectiveConfig(**POINTS_ONLY)
    st = optimize_gn(small_decoder, small_flow, points_bundle(P), cfg)
    assert st.history[-1]["loss_surface"] < 1e-7
    assert np.all(np.isfinite(flow_forward(small_flow, st.w)))


def test_first_order_converges(small_decoder, target):
    _, P = target
    cfg = ObjectiveConfig(fo_lr=5e-3, fo_max_iter=3000, **POINTS_ONLY)
    st = optimize_first_order(small_decoder, None, points_bundle(P), cfg)
    assert st.converged
    assert st.history[-1]["loss"] < 0.05 * st.history[0]["loss"]


def test_first_order_decay_reaches_step_tolerance(small_decoder, target):
    _, P = target
    cfg = ObjectiveConfig(fo_lr=5e-2, fo_decay=0.95, fo_max_iter=1000, **POINTS_ONLY)
    st = optimize_first_order(small_decoder, None, points_bundle(P), cfg)
    assert st.status == "step_tol" and st.iteration < 400
    steps = [h["step_norm"] for h in st.history[1:]]
    assert steps[-1] < cfg.step_tol * 2 and steps[-1] < steps[0] * 1e-2
    with pytest.raises(ValueError):
        ObjectiveConfig(fo_decay=0.0)
    with pytest.raises(ValueError):
        ObjectiveConfig(fo_decay=1.5)


def test_gn_recovers_pose(small_decoder, target):
    z_star, P = target
    true_pose = SimilarityPose.from_matrix(rotation_about((0, 1, 0), 0.1), np.array([0.03, -0.02, 0.01]), 1.1)
    X = true_pose.apply_inverse(P)
    cfg = ObjectiveConfig(lambda_mask=0.0, lambda_depth=0.0, lambda_reg=0.0, optimize_pose=True)
    init = OptimizationState(z_star, SimilarityPose.identity())
    st = optimize_gn(small_decoder, None, points_bundle(X), cfg, init)
    assert st.history[-1]["loss_surface"] < 1e-8
    assert np.abs(st.pose.apply(X) - P).max() < 5e-3


def test_frozen_pose_stays_put(small_decoder, target):
    _, P = target
    start = SimilarityPose.from_matrix(np.eye(3), np.array([0.01, 0, 0]), 1.0)
    st = optimize_gn(small_decoder, None, points_bundle(P), ObjectiveConfig(**POINTS_ONLY), OptimizationState(pose=start))
    assert np.array_equal(st.pose.as_vector(), start.as_vector())


def test_regularizer_alone_keeps_zero(small_decoder):
    cfg = ObjectiveConfig(lambda_surface=0.0, lambda_mask=0.0, lambda_depth=0.0, lambda_reg=1.0)
    st = optimize_gn(small_decoder, None, points_bundle(np.zeros((0, 3))), cfg)
    assert np.array_equal(st.w, np.zeros(16))


def test_require_observations():
    with pytest.raises(ValueError):
        ObjectiveConfig(lambda_surface=0.0, lambda_mask=0.0, lambda_depth=0.0).require_observations()
    with pytest.raises(ValueError):
        ObjectiveConfig(lambda_reg=-1.0)
    cfg = ObjectiveConfig.mask_only()
    assert cfg.lambda_surface == 0.0 and cfg.lambda_depth == 0.0 and cfg.lambda_mask > 0


@pytest.fixture(scope="module")
def rendered_bundle():
    from flowsdf.corpus import make_shape

    cams = [look_at((3 * np.sin(a), 0.5, 3 * np.cos(a)), (0, 0, 0), focal=40.0, width=48, height=48) for a in (0.3, 2.4)]
    return make_observation_bundle(make_shape(3), cams, NoiseConfig(), n_points_per_frame=40, seed=1)


def test_total_objective_is_the_weighted_sum(small_decoder, small_flow, rendered_bundle):
    cfg = ObjectiveConfig(lambda_surface=2.0, lambda_mask=0.3, lambda_depth=0.7, lambda_reg=0.1, ray_budget=40)
    w = 0.3 * np.random.default_rng(0).normal(size=16)
    state = OptimizationState(w, SimilarityPose.identity())
    L, r, J, t = total_objective(small_decoder, small_flow, state, rendered_bundle, cfg)
    expected = 2.0 * t["surface"] + 0.3 * t["mask"] + 0.7 * t["depth"] + 0.1 * t["reg"]
    assert L == pytest.approx(expected, rel=1e-9, abs=1e-9)
    assert t["reg"] == pytest.approx(w @ w)
    assert J.shape == (len(r), 23)


def test_rays_are_deterministic(rendered_bundle):
    cfg = ObjectiveConfig(ray_budget=30)
    a = build_frame_rays(rendered_bundle, SimilarityPose.identity(), cfg)
    b = build_frame_rays(rendered_bundle, SimilarityPose.identity(), cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.pixels, y.pixels) and np.array_equal(x.d_max, y.d_max)


def test_gn_with_all_terms_is_monotone(small_decoder, small_flow, rendered_bundle):
    cfg = ObjectiveConfig(ray_budget=40, n_samples=16, gn_max_iter=8, lambda_reg=1e-3)
    init = OptimizationState(np.zeros(16), init_pose_pca(rendered_bundle.fused_points))
    st = optimize_gn(small_decoder, small_flow, rendered_bundle, cfg, init)
    L = accepted_losses(st)
    assert L[-1] <= L[0]
    assert all(b <= a for a, b in zip(L, L[1:]))
    for line in st.report_lines():
        rec = json.loads(line)
        assert {"iteration", "loss", "step_norm", "damping", "loss_mask", "loss_depth"} <= set(rec)


def test_pca_pose_normalizes_a_box():
    rng = np.random.default_rng(3)
    canonical = rng.uniform(-1, 1, size=(4000, 3)) * np.array([0.9, 0.3, 0.4])
    truth = SimilarityPose.from_matrix(rotation_about((0, 1, 0), 0.7), np.array([0.2, -0.1, 0.5]), 1.5)
    world = truth.apply_inverse(canonical)
    pose = init_pose_pca(world)
    mapped = pose.apply(world)
    assert pose.scale == pytest.approx(1.5, rel=0.02)
    # long axis lands on x, up stays up, sign of x may flip
    assert np.abs(mapped[:, 0]).max() == pytest.approx(0.9, rel=0.02)
    assert np.abs(mapped[:, 1]).max() == pytest.approx(0.3, rel=0.05)
    assert np.abs(mapped.mean(axis=0)).max() < 0.02


def test_pca_pose_rejects_degenerate_input():
    with pytest.raises(ValueError):
        init_pose_pca(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        init_pose_pca(np.zeros((10, 3)))


def test_decode_shape_carries_code(small_decoder, small_flow):
    w = np.ones(16) * 0.1
    f = decode_shape(small_decoder, small_flow, w)
    assert np.array_equal(f.code, flow_forward(small_flow, w))
    p = np.zeros((2, 3))
    assert np.array_equal(f(p), decoder_forward(small_decoder, f.code, p))


def test_estimator_fit_predict_in_world_units(small_decoder, target):
    z_star, P = target
    pose = SimilarityPose.from_matrix(np.eye(3), np.zeros(3), 2.0)
    X = pose.apply_inverse(P)
    cfg = ObjectiveConfig(lambda_mask=0.0, lambda_depth=0.0, lambda_reg=0.0, optimize_pose=False)
    est = ShapeOptimizer(small_decoder, None, "gn", cfg, init_pose=pose).fit(points_bundle(X))
    assert np.abs(est.predict(X)).max() < 1e-4
    with pytest.raises(ValueError):
        ShapeOptimizer(small_decoder, None, "sgd", cfg, init_pose=pose).fit(points_bundle(X))
    bad = ObjectiveConfig(lambda_surface=0.0, lambda_mask=0.0, lambda_depth=0.0)
    with pytest.raises(ValueError):
        ShapeOptimizer(small_decoder, None, "gn", bad).fit(points_bundle(X))
