import numpy as np
import pytest

from featsplat.synth import correspondences, make_dataset, orbit_views, perturb_scene, render_depth

from conftest import front_camera, single_splat


@pytest.fixture(scope="module")
def ds():
    return make_dataset(num_gaussians=20, feature_dim=3, num_views=6, width=48, height=48, map_channels=5, seed=1)


def test_dataset_shapes_and_determinism(ds):
    assert len(ds.views) == len(ds.images) == len(ds.feature_maps) == 6
    assert ds.images[0].shape == (48, 48, 3) and ds.feature_maps[0].shape == (12, 12, 5)
    assert 0.0 <= ds.images[0].min() and ds.images[0].max() <= 1.0
    again = make_dataset(num_gaussians=20, feature_dim=3, num_views=6, width=48, height=48, map_channels=5, seed=1)
    assert all(np.array_equal(a, b) for a, b in zip(ds.feature_maps, again.feature_maps))
    (tv, _, _), (hv, _, _) = ds.split(2)
    assert len(tv) == 4 and hv[0] is ds.views[4]


def test_orbit_cameras_face_origin():
    for cam in orbit_views(5, 32, 32):
        uv, z = cam.project_points(np.zeros((1, 3)))
        assert np.allclose(uv[0], [16, 16]) and z[0] == pytest.approx(2.6)


def test_render_depth_single_splat():
    scene = single_splat(np.zeros(3), scale=0.1, opacity=0.99)
    depth, acc = render_depth(scene, front_camera(distance=2.5))
    assert depth[16, 16] == pytest.approx(2.5)
    assert acc[0, 0] == 0.0 and np.isinf(depth[0, 0])


def test_self_correspondences_are_identity(ds):
    pa, pb = correspondences(ds.scene, ds.views[0], ds.views[0])
    assert len(pa) > 10
    assert np.allclose(pa, pb, atol=1e-9)


def test_correspondences_round_trip(ds):
    a, b = ds.views[0], ds.views[1]
    pa, pb = correspondences(ds.scene, a, b, stride=2)
    assert len(pa) > 10
    # lift B's matched pixels with B's depth and send them back to A
    depth_b, _ = render_depth(ds.scene, b)
    ub, vb = np.floor(pb).astype(int).T
    z = depth_b[vb, ub]
    cam_pts = np.column_stack([(pb[:, 0] - b.cx) / b.fx * z, (pb[:, 1] - b.cy) / b.fy * z, z])
    back, _ = a.project_points((cam_pts - b.translation) @ b.rotation)
    assert np.median(np.linalg.norm(back - pa, axis=1)) < 1.0


def test_perturb_keeps_count_and_resets_features(ds):
    out = perturb_scene(ds.scene, np.random.default_rng(0), feature_dim=7, decoder_out=4)
    assert len(out) == len(ds.scene) and out.features.shape == (20, 7)
    assert out.decoder.in_channels == 7 and out.decoder.out_channels == 4
    assert not np.array_equal(out.means, ds.scene.means)
