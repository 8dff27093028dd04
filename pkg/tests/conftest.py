import os
import warnings

import numpy as np
import pytest

from flowsdf.decoder import init_decoder
from flowsdf.experiments import ExperimentConfig, load_or_train, make_manifest
from flowsdf.flow import FlowSaturationWarning, data_init, init_flow

CACHE_DIR = os.environ.get("FLOWSDF_CACHE", os.path.join(os.path.dirname(os.path.dirname(__file__)), ".cache"))


def perturbed_decoder(hidden=32, seed=0, scale=0.3):
    """Geometric init plus noise: smooth, non-trivial and cheap."""
    theta = init_decoder(hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for l in range(len(theta.W)):
        theta.W[l] = theta.W[l] + scale * rng.normal(size=theta.W[l].shape) / np.sqrt(theta.W[l].shape[0])
        theta.b[l] = theta.b[l] + 0.1 * scale * rng.normal(size=theta.b[l].shape)
    return theta


def fitted_flow(seed=0, n=200):
    """Data-initialized flow on a skewed synthetic code cloud (no training loop)."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(16, 16)) * 0.05
    Z = np.tanh(rng.normal(size=(n, 16))) @ A + 0.02 * rng.normal(size=(n, 16)) ** 2
    phi = init_flow(16, 8, 3, seed)
    data_init(phi, Z)
    return phi, Z


@pytest.fixture(scope="session")
def small_decoder():
    return perturbed_decoder()


@pytest.fixture(scope="session")
def small_flow():
    return fitted_flow()[0]


@pytest.fixture(scope="session")
def reference_config():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def reference_manifest(reference_config):
    return make_manifest(reference_config)


@pytest.fixture(scope="session")
def trained_model(reference_config):
    """Decoder and flow trained with the default experiment config (cached on disk)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FlowSaturationWarning)
        return load_or_train(reference_config, CACHE_DIR)


ACCEPTANCE_LINES = {}


def record_verdict(criterion, ok, detail):
    """Store one acceptance verdict for the terminal summary, then fail the test if it did not hold."""
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
