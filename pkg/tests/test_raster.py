import numpy as np
import pytest

from featsplat.raster import (
    EmptySceneError, RasterSettings, StaleCacheError, _tile_alpha, project_scene, rasterize_backward,
    rasterize_features, rasterize_reference, rasterize_rgb,
)
from featsplat.scene import CameraView, FeatureDecoder, Scene, logit

from conftest import front_camera, make_scene, single_splat
from gradcheck import check_gradients


def _two_coincident(feat_front, feat_back, opacity=0.5):
    # tiny depth offset fixes the order; large scale keeps alpha ~ opacity at the centre pixel
    means = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1e-3]])
    D = len(feat_front)
    return Scene(means, np.log(np.full((2, 3), 0.3)), np.tile([1.0, 0, 0, 0], (2, 1)),
                 np.full(2, logit(opacity)), np.zeros((2, 1, 3)), np.array([feat_front, feat_back], float),
                 FeatureDecoder.identity(D), 0)


def _centred_camera(size=33):
    # odd size puts a pixel centre exactly on the optical axis
    return CameraView(size, size, 40.0, 40.0, size / 2, size / 2, np.array(
        [[1.0, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 2.0], [0, 0, 0, 1]]))


def test_single_splat_centre_feature():
    scene = single_splat(opacity=0.99, feature=(1.0, -2.0, 0.5))
    out = rasterize_features(scene, _centred_camera())
    assert np.allclose(out.image[16, 16], 0.99 * np.array([1.0, -2.0, 0.5]))


def test_two_coincident_splats():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    out = rasterize_features(_two_coincident(a, b), _centred_camera())
    assert np.allclose(out.image[16, 16], 0.5 * a + 0.25 * b)


def test_huge_opaque_splat_clamps_alpha():
    c = np.array([0.2, 0.6, 0.9])
    from featsplat.sh import SH_C0
    scene = single_splat(scale=50.0, opacity=0.999999, color_dc=(c - 0.5) / SH_C0)
    bg = np.array([1.0, 0.0, 0.5])
    out = rasterize_rgb(scene, _centred_camera(), background=bg)
    assert np.allclose(out.image, 0.99 * c + 0.01 * bg)


def test_empty_tiles_get_background_exactly():
    scene = single_splat(mean=(0.0, 0.0, 0.0), scale=0.02, opacity=0.9)
    cam = CameraView(64, 64, 40.0, 40.0, 8.0, 8.0, np.array(
        [[1.0, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 2.0], [0, 0, 0, 1]]))
    bg = np.array([0.25, 0.5, 0.75])
    out = rasterize_rgb(scene, cam, background=bg)
    assert np.array_equal(out.image[32:, 32:], np.broadcast_to(bg, (32, 32, 3)))


def test_single_splat_closed_form_falloff():
    scene = single_splat(scale=0.15, opacity=0.6, feature=(1.0,))
    cam = _centred_camera(21)
    out = rasterize_reference(scene, cam, channel_mode="feature")
    var = (cam.fx * 0.15 / 2.0) ** 2 + 0.3
    v, u = np.mgrid[0:21, 0:21]
    d2 = (u + 0.5 - cam.cx) ** 2 + (v + 0.5 - cam.cy) ** 2
    a = 0.6 * np.exp(-0.5 * d2 / var)
    expected = np.where(a >= 1 / 255, a, 0.0)
    assert np.allclose(out.image[..., 0], expected, atol=1e-12)


def test_empty_scene():
    scene = make_scene(0, feature_dim=2)
    cam = front_camera(8, 8)
    with pytest.raises(EmptySceneError):
        rasterize_rgb(scene, cam)
    ref = rasterize_reference(scene, cam, background=(0.1, 0.2, 0.3))
    assert np.allclose(ref.image, [0.1, 0.2, 0.3])


@pytest.mark.parametrize("seed", [0, 1])
def test_fast_path_matches_reference_rgb(seed):
    scene = make_scene(50, seed=seed, sh_degree=2)
    cam = front_camera(32, 32)
    fast = rasterize_rgb(scene, cam, background=(0.3, 0.1, 0.7))
    ref = rasterize_reference(scene, cam, background=(0.3, 0.1, 0.7))
    ok = ~fast.terminated
    assert np.max(np.abs(fast.image - ref.image)[ok]) < 1e-5


def test_fast_path_matches_reference_features():
    scene = make_scene(100, feature_dim=8, seed=3)
    cam = front_camera(24, 24)
    fast = rasterize_features(scene, cam)
    ref = rasterize_reference(scene, cam, channel_mode="feature")
    assert np.max(np.abs(fast.image - ref.image)[~fast.terminated]) < 1e-5


def test_compositing_weights_sum():
    scene = make_scene(40, feature_dim=2, seed=5)
    out = rasterize_features(scene, front_camera(32, 32))
    assert np.all((out.transmittance >= 0) & (out.transmittance <= 1))
    ones = scene.copy()
    ones.features = np.ones((len(scene), 2))
    acc = rasterize_features(ones, front_camera(32, 32)).image[..., 0]
    assert np.allclose(acc, 1 - out.transmittance)


def test_rgb_and_feature_share_alphas():
    scene = make_scene(30, feature_dim=3, seed=6)
    cam = front_camera(32, 32)
    a = rasterize_rgb(scene, cam).cache
    b = rasterize_features(scene, cam).cache
    assert np.array_equal(a.n_keep, b.n_keep)
    for ta, tb in zip(a.tiles, b.tiles):
        if len(ta.ids):
            assert np.array_equal(_tile_alpha(ta, a.projection, a.settings)[4],
                                  _tile_alpha(tb, b.projection, b.settings)[4])


def test_deterministic_and_thread_count_invariant(monkeypatch):
    scene = make_scene(60, feature_dim=4, seed=7)
    cam = front_camera(48, 40)
    monkeypatch.setenv("FEATSPLAT_THREADS", "1")
    one = rasterize_features(scene, cam)
    g1 = rasterize_backward(scene, cam, np.ones_like(one.image), one.cache)
    monkeypatch.setenv("FEATSPLAT_THREADS", "3")
    three = rasterize_features(scene, cam)
    g3 = rasterize_backward(scene, cam, np.ones_like(three.image), three.cache)
    assert np.array_equal(one.image, three.image)
    for k, v in g1.as_dict().items():
        assert np.array_equal(v, g3.as_dict()[k])


def test_early_termination_flags_opaque_pixels():
    scene = make_scene(40, seed=8, opacity=(0.98, 0.99), scale=(0.3, 0.5))
    out = rasterize_rgb(scene, front_camera(16, 16))
    assert out.terminated.any()
    loose = rasterize_rgb(scene, front_camera(16, 16), settings=RasterSettings(min_transmittance=0.0))
    assert not loose.terminated.any()
    # compositing stops once transmittance would fall below 1e-4, so what is dropped
    # carries at most 1e-4 / (1 - 0.99) of the remaining weight
    scale = np.max(rasterize_rgb(scene, front_camera(16, 16)).cache.colors) + 1.0
    assert np.max(np.abs(out.image - loose.image)) < 1e-2 * scale


def test_degenerate_splat_counted():
    scene = single_splat()
    proj = project_scene(scene, front_camera())
    assert proj.degenerate == 0 and proj.visible[0]


def test_backward_zero_upstream():
    scene = make_scene(10, feature_dim=3, seed=9)
    cam = front_camera(16, 16)
    out = rasterize_rgb(scene, cam)
    for v in rasterize_backward(scene, cam, np.zeros_like(out.image), out.cache).as_dict().values():
        assert not np.any(v)


def test_single_splat_feature_gradient_is_alpha():
    scene = single_splat(opacity=0.7, feature=(1.0, 2.0))
    cam = _centred_camera()
    out = rasterize_features(scene, cam)
    up = np.zeros_like(out.image)
    up[16, 16, 1] = 1.0
    g = rasterize_backward(scene, cam, up, out.cache)
    alpha = out.image[16, 16, 0] / 1.0
    assert g.features[0, 1] == pytest.approx(alpha)
    assert g.features[0, 0] == 0.0


def test_stale_cache_rejected():
    scene = make_scene(5, seed=10)
    cam = front_camera(16, 16)
    out = rasterize_rgb(scene, cam)
    scene.means[0, 0] += 0.01
    with pytest.raises(StaleCacheError):
        rasterize_backward(scene, cam, np.ones_like(out.image), out.cache)


def test_feature_only_backward_skips_geometry():
    scene = make_scene(8, feature_dim=3, seed=11)
    cam = front_camera(16, 16)
    out = rasterize_features(scene, cam)
    full = rasterize_backward(scene, cam, np.ones_like(out.image), out.cache)
    light = rasterize_backward(scene, cam, np.ones_like(out.image), out.cache, geometry=False)
    assert np.array_equal(full.features, light.features)
    assert not light.means.any() and full.means.any()


@pytest.mark.parametrize("mode", ["rgb", "feature"])
def test_gradients_match_finite_differences(mode):
    scene = make_scene(8, feature_dim=3, seed=12, sh_degree=2, scale=(0.2, 0.5), opacity=(0.2, 0.7))
    worst, n, skipped = check_gradients(scene, front_camera(16, 16), mode)
    assert worst < 1e-3 and skipped < n // 20


def test_gradients_with_early_termination():
    scene = make_scene(12, feature_dim=2, seed=13, sh_degree=1, scale=(0.3, 0.5), opacity=(0.9, 0.97))
    cam = front_camera(16, 16)
    assert rasterize_rgb(scene, cam).terminated.any()
    worst, n, skipped = check_gradients(scene, cam, "rgb", max_entries=120)
    assert worst < 1e-3 and skipped < n // 4
