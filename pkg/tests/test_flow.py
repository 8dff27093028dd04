import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from flowsdf.flow import (
    FlowInversionError,
    FlowSaturationWarning,
    FlowTrainConfig,
    GaussianizationFlow,
    flow_block_logdets,
    flow_forward,
    flow_inverse,
    flow_jacobian,
    flow_logdet,
    flow_value_and_jacobian,
    gaussian_baseline_loglik,
    householder_product,
    householder_vectors_for,
    init_flow,
    kernel_inverse,
    log_likelihood,
    nll_and_grads,
    train_flow,
)

from conftest import fitted_flow


def test_householder_product_is_orthogonal():
    Q = householder_product(np.random.default_rng(0).normal(size=(16, 16)))
    assert np.abs(Q @ Q.T - np.eye(16)).max() < 1e-12


def test_householder_vectors_reproduce_rotation():
    rng = np.random.default_rng(1)
    Q, _ = np.linalg.qr(rng.normal(size=(16, 16)))
    P = householder_product(householder_vectors_for(Q))
    signs = np.diag(P @ Q.T)
    assert np.abs(np.abs(signs) - 1.0).max() < 1e-10
    assert np.abs(P - signs[:, None] * Q).max() < 1e-10


def test_identity_init_is_odd_and_near_identity_centrally():
    phi = init_flow(16, 8, 3, seed=0, identity=True)
    for blk in phi.blocks:
        assert np.abs(blk.rotation() - np.eye(16)).max() < 1e-12
    w = np.random.default_rng(0).uniform(-1.5, 1.5, size=(200, 16))
    z = flow_forward(phi, w)
    assert np.abs(z - w).max() < 0.25
    assert np.abs(flow_forward(phi, -w) + z).max() < 1e-10
    assert np.abs(flow_forward(phi, np.zeros(16))).max() < 1e-12


def test_roundtrip(small_flow):
    rng = np.random.default_rng(2)
    w = rng.normal(size=(1000, 16))
    assert np.abs(flow_inverse(small_flow, flow_forward(small_flow, w)) - w).max() < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-4.0, 4.0), min_size=16, max_size=16))
def test_roundtrip_property(w):
    phi, _ = fitted_flow(seed=3, n=120)
    w = np.array(w)
    assert np.abs(flow_inverse(phi, flow_forward(phi, w)) - w).max() < 1e-8


def test_jacobian_matches_central_differences(small_flow):
    rng = np.random.default_rng(4)
    h = 1e-5
    for _ in range(6):
        w = rng.normal(size=16)
        z, J = flow_value_and_jacobian(small_flow, w)
        assert np.array_equal(z, flow_forward(small_flow, w))
        fd = np.empty((16, 16))
        for k in range(16):
            e = np.zeros(16)
            e[k] = h
            fd[:, k] = (flow_forward(small_flow, w + e) - flow_forward(small_flow, w - e)) / (2 * h)
        assert np.abs(J - fd).max() / np.abs(fd).max() < 1e-4
        assert np.array_equal(flow_jacobian(small_flow, w), J)


def test_logdet_matches_jacobian_determinant(small_flow):
    rng = np.random.default_rng(5)
    for _ in range(5):
        w = rng.normal(size=16)
        J = flow_jacobian(small_flow, w)
        assert flow_logdet(small_flow, w) == pytest.approx(np.linalg.slogdet(J)[1], abs=1e-4)


def test_block_logdets_sum(small_flow):
    W = np.random.default_rng(6).normal(size=(10, 16))
    assert np.allclose(flow_block_logdets(small_flow, W).sum(axis=1), flow_logdet(small_flow, W), atol=1e-10)


def test_log_likelihood_is_change_of_variables():
    """Change of variables: density of z equals N(w) times |dw/dz|."""
    phi, Z = fitted_flow(seed=7)
    w = flow_inverse(phi, Z[:5])
    expected = multivariate_normal(np.zeros(16), np.eye(16)).logpdf(w) - flow_logdet(phi, w)
    assert np.allclose(log_likelihood(phi, Z[:5]), expected, atol=1e-8)


def test_nll_gradients_match_central_differences():
    phi, Z = fitted_flow(seed=8, n=40)
    ref = phi.copy()
    for blk in phi.blocks:
        blk.mu += 0.01
    loss, grads = nll_and_grads(phi, Z, reg=0.5, ref=ref)
    arrays = phi.arrays()
    rng = np.random.default_rng(9)
    h = 1e-6
    for a, g in zip(arrays, grads):
        for _ in range(2):
            i = tuple(rng.integers(n) for n in a.shape)
            old = a[i]
            a[i] = old + h
            lp = nll_and_grads(phi, Z, reg=0.5, ref=ref)[0]
            a[i] = old - h
            lm = nll_and_grads(phi, Z, reg=0.5, ref=ref)[0]
            a[i] = old
            assert g[i] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-7)


def test_training_beats_gaussian_and_keeps_rotations_orthogonal():
    _, Z = fitted_flow(seed=10, n=300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FlowSaturationWarning)
        res = train_flow(Z, FlowTrainConfig(epochs=15))
    assert res.history[-1] > gaussian_baseline_loglik(Z)
    for blk in res.phi.blocks:
        R = blk.rotation()
        assert np.abs(R @ R.T - np.eye(16)).max() < 1e-10


def test_gaussian_data_stays_gaussian():
    Z = np.random.default_rng(11).normal(size=(400, 16))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FlowSaturationWarning)
        res = train_flow(Z, FlowTrainConfig(epochs=10))
    assert res.history[-1] / 16 == pytest.approx(gaussian_baseline_loglik(Z) / 16, abs=0.05)


def test_training_is_deterministic():
    _, Z = fitted_flow(seed=12, n=100)
    a = train_flow(Z, FlowTrainConfig(epochs=3))
    b = train_flow(Z, FlowTrainConfig(epochs=3))
    assert np.array_equal(a.phi.flat(), b.phi.flat())


def test_train_rejects_single_code():
    with pytest.raises(ValueError):
        train_flow(np.zeros((1, 16)))


def test_far_tail_warns_instead_of_failing(small_flow):
    with pytest.warns(FlowSaturationWarning):
        flow_inverse(small_flow, np.full(16, 1e3))


def test_kernel_inverse_reports_block():
    phi = init_flow(4, 3, 1, seed=0)
    with pytest.raises(FlowInversionError) as info:
        kernel_inverse(phi.blocks[0], np.full((1, 4), 0.3), block_index=2, max_iter=1)
    assert info.value.block == 2


def test_estimator_interface():
    _, Z = fitted_flow(seed=13, n=150)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FlowSaturationWarning)
        est = GaussianizationFlow(epochs=3).fit(Z)
    W = est.transform(Z[:10])
    assert np.abs(est.inverse_transform(W) - Z[:10]).max() < 1e-8
    assert est.score(Z) == pytest.approx(np.mean(est.score_samples(Z)))
