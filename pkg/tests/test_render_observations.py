import numpy as np
import pytest

from flowsdf.corpus import ProceduralShape, make_shape, oracle_sdf
from flowsdf.observations import (
    TAG_BOX,
    TAG_SURFACE,
    NoiseConfig,
    bundle_from_bytes,
    bundle_to_bytes,
    load_bundle,
    make_observation_bundle,
    save_bundle,
)
from flowsdf.render import HIT_EPS, CameraModel, backproject, look_at, orbit_cameras, render_view


@pytest.fixture(scope="module")
def sphere_view():
    cam = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), focal=80.0, width=64, height=64)
    return cam, render_view(ProceduralShape.sphere(1.0), cam)


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        CameraModel(0.0, 80.0, 32, 32, 64, 64)
    with pytest.raises(ValueError):
        CameraModel(80.0, 80.0, 99, 32, 64, 64)


def test_sphere_silhouette_radius(sphere_view):
    cam, rr = sphere_view
    expected = 80.0 / np.sqrt(3.0**2 - 1.0)
    v, u = np.nonzero(rr.mask)
    radius = np.hypot(u - cam.cx, v - cam.cy).max()
    assert abs(radius - expected) <= 1.0
    assert abs(np.sqrt(rr.mask.sum() / np.pi) - expected) <= 1.0


def test_sphere_center_depth():
    cam = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), focal=80.0, width=65, height=65)
    rr = render_view(ProceduralShape.sphere(1.0), cam)
    assert rr.depth[32, 32] == pytest.approx(2.0, abs=HIT_EPS)


def test_backprojected_depths_lie_on_surface():
    shape = make_shape(3)
    for cam in orbit_cameras(2):
        rr = render_view(shape, cam)
        v, u = np.nonzero(rr.mask)
        X = backproject(cam, u.astype(float), v.astype(float), rr.depth[v, u])
        assert np.abs(oracle_sdf(shape, X)).max() < 2 * HIT_EPS
        assert np.all(np.isinf(rr.depth[~rr.mask]))


def test_shape_outside_frustum_gives_empty_mask():
    cam = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 10.0), focal=80.0)
    shape = make_shape(0)
    rr = render_view(shape, cam)
    assert rr.empty and not rr.mask.any()
    b = make_observation_bundle(shape, [cam], n_points_per_frame=5)
    assert b.metadata["empty_frames"] == [0]


def test_noise_free_points_on_surface():
    shape = make_shape(6)
    b = make_observation_bundle(shape, orbit_cameras(1), NoiseConfig(), n_points_per_frame=80, seed=2)
    assert np.abs(oracle_sdf(shape, b.fused_points)).max() < 2 * HIT_EPS


def test_fused_point_count_bound():
    b = make_observation_bundle(make_shape(1), orbit_cameras(10), n_points_per_frame=5, seed=0)
    assert len(b.fused_points) <= 50


def test_point_noise_propagates():
    shape = make_shape(8)
    b = make_observation_bundle(shape, orbit_cameras(4), NoiseConfig(point_sigma=0.01), n_points_per_frame=400, seed=1)
    rms = np.sqrt(np.mean(oracle_sdf(shape, b.fused_points) ** 2))
    assert 0.7 * 0.01 <= rms <= 1.3 * 0.01


def test_pixel_sets_respect_mask_and_box():
    b = make_observation_bundle(make_shape(2), orbit_cameras(3), NoiseConfig(mask_radius=1), n_points_per_frame=30, seed=4)
    for f in b.frames:
        px = f.depth_pixels
        u, v, tag = px[:, 0].astype(int), px[:, 1].astype(int), px[:, 3]
        assert np.all(f.mask[v[tag == TAG_SURFACE], u[tag == TAG_SURFACE]])
        ub, vb = u[tag == TAG_BOX], v[tag == TAG_BOX]
        u0, v0, u1, v1 = f.bbox2d
        assert np.all(~f.mask[vb, ub])
        assert np.all((ub >= u0) & (ub <= u1) & (vb >= v0) & (vb <= v1))
        assert np.all(np.isnan(px[tag == TAG_BOX, 2]))


def test_short_frames_flagged():
    cam = look_at((0.0, 0.0, 3.0), (0.0, 0.0, 0.0), focal=10.0, width=16, height=16)
    b = make_observation_bundle(make_shape(0), [cam], n_points_per_frame=1000, seed=0)
    assert b.metadata["short_frames"] == [0]
    assert 0 < len(b.fused_points) < 1000


def test_bundle_is_pure_in_its_inputs():
    shape, cams = make_shape(4), orbit_cameras(2)
    noise = NoiseConfig(point_sigma=0.005, depth_sigma=0.01, mask_radius=-1)
    a = make_observation_bundle(shape, cams, noise, 20, seed=7)
    b = make_observation_bundle(shape, cams, noise, 20, seed=7)
    assert bundle_to_bytes(a) == bundle_to_bytes(b)


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(mask_radius=3)
    with pytest.raises(ValueError):
        NoiseConfig(point_sigma=-1.0)


def test_nfob_roundtrip(tmp_path):
    b = make_observation_bundle(make_shape(9), orbit_cameras(2), NoiseConfig(point_sigma=0.01), 10, seed=3)
    data = bundle_to_bytes(b)
    assert data[:4] == b"NFOB"
    assert bundle_to_bytes(bundle_from_bytes(data)) == data
    path = tmp_path / "obs.nfob"
    save_bundle(b, path)
    again = load_bundle(path)
    assert bundle_to_bytes(again) == data
    assert again.metadata["n_frames"] == 2
    with pytest.raises(ValueError):
        bundle_from_bytes(data + b"\0")
