from dataclasses import replace

import numpy as np
import pytest

from flowsdf.experiments import ExperimentConfig, make_manifest, make_trials


def test_prior_weight_scales_with_point_count():
    cfg = ExperimentConfig(reg_per_point={"complete": 1e-3, "partial": 1e-3})
    complete = cfg.objective_config()
    partial = replace(cfg, protocol="partial").objective_config()
    assert complete.lambda_reg == pytest.approx(1e-3 / cfg.complete_points)
    assert partial.lambda_reg == pytest.approx(1e-3 / cfg.partial_points)
    assert not complete.optimize_pose and complete.lambda_mask == 0.0 and complete.lambda_depth == 0.0


def test_mask_only_uses_objective_weight():
    cfg = ExperimentConfig(protocol="mask-only", objective={"lambda_reg": 3e-4})
    ocfg = cfg.objective_config()
    assert ocfg.lambda_reg == 3e-4 and ocfg.lambda_surface == 0.0 and ocfg.lambda_depth == 0.0
    assert ocfg.lambda_mask > 0 and ocfg.optimize_pose


def test_reg_per_point_forms():
    assert ExperimentConfig(reg_per_point=2e-3).reg_per_point == {"complete": 2e-3, "partial": 2e-3}
    merged = ExperimentConfig.from_dict({"reg_per_point": {"complete": 5e-4}})
    assert merged.reg_per_point["complete"] == 5e-4
    assert merged.reg_per_point["partial"] == ExperimentConfig().reg_per_point["partial"]
    fallback = ExperimentConfig.from_dict({"reg_per_point": {"complete": None}, "objective": {"lambda_reg": 7e-5}})
    assert fallback.objective_config().lambda_reg == 7e-5
    with pytest.raises(ValueError):
        ExperimentConfig(reg_per_point={"mask-only": 1.0})
    with pytest.raises(ValueError):
        ExperimentConfig(reg_per_point={"partial": -1.0})


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        ExperimentConfig(protocol="sparse")
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"lambda": 1})
    cfg = ExperimentConfig.from_dict({"decoder": {"hidden": 8}, "n_heldout": 4})
    assert cfg.decoder["hidden"] == 8 and cfg.decoder["epochs"] == ExperimentConfig().decoder["epochs"]
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_training_key_ignores_evaluation_knobs():
    a = ExperimentConfig()
    assert a.training_key() == replace(a, protocol="partial", reg_per_point=0.5, mc_resolution=16).training_key()
    assert a.training_key() != replace(a, n_train=10).training_key()


@pytest.fixture(scope="module")
def small_cfg():
    return ExperimentConfig(n_train=5, n_heldout=3, partial_views=4, mask_trials=5, image_size=24, focal=30.0, complete_points=40)


def test_trial_counts_and_order(small_cfg):
    m = make_manifest(small_cfg)
    complete = make_trials(small_cfg, m)
    partial = make_trials(replace(small_cfg, protocol="partial"), m)
    mask = make_trials(replace(small_cfg, protocol="mask-only"), m)
    assert [t.shape_seed for t in complete] == m.heldout_seeds
    assert len(partial) == 12 and [(t.object_index, t.view) for t in partial[:5]] == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]
    assert len(mask) == 5 and [t.shape_seed for t in mask] == (m.heldout_seeds * 2)[:5]
    assert complete[0].bundle.fused_points.shape == (40, 3)


def test_trials_are_reproducible(small_cfg):
    m = make_manifest(small_cfg)
    cfg = replace(small_cfg, protocol="mask-only")
    a, b = make_trials(cfg, m), make_trials(cfg, m)
    for x, y in zip(a, b):
        assert np.array_equal(x.bundle.fused_points, y.bundle.fused_points)
        assert np.array_equal(x.object_pose.as_vector(), y.object_pose.as_vector())
        assert all(np.array_equal(f.mask, g.mask) for f, g in zip(x.bundle.frames, y.bundle.frames))
