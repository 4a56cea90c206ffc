import numpy as np
import pytest

from featsplat.scene import ConfigurationError, logit
from featsplat.synth import make_dataset, perturb_scene
from featsplat.trainer import DivergenceError, FitConfig, GradStats, densify_and_prune, fit_scene, initial_scene_for

from conftest import make_scene


@pytest.fixture(scope="module")
def small():
    return make_dataset(num_gaussians=8, feature_dim=4, num_views=4, width=24, height=24, feature_size=(8, 8), seed=3)


def _cfg(**kw):
    base = dict(iterations=20, feature_dim=4, allow_any_feature_dim=True, densify=False, seed=1, log_every=5)
    base.update(kw)
    return FitConfig(**base)


def _init(ds, seed=0):
    return perturb_scene(ds.scene, np.random.default_rng(seed), feature_dim=4, decoder_out=4)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        FitConfig(feature_dim=48).validate()
    FitConfig(feature_dim=48, allow_any_feature_dim=True).validate()
    assert FitConfig().feature_dim == 64 and FitConfig().iterations == 30000
    with pytest.raises(ConfigurationError):
        FitConfig(lambda_dssim=1.5).validate()


def test_missing_feature_map_rejected(small):
    maps = list(small.feature_maps)
    maps[1] = None
    with pytest.raises(ConfigurationError, match="view 1"):
        fit_scene(small.views, small.images, maps, _cfg(), _init(small))


def test_single_view_rejected(small):
    with pytest.raises(ConfigurationError):
        fit_scene(small.views[:1], small.images[:1], small.feature_maps[:1], _cfg(), _init(small))


def test_decoder_shape_for_wide_maps(small):
    rng = np.random.default_rng(0)
    maps = [rng.normal(size=(4, 4, 384)) for _ in small.views]
    init = initial_scene_for(small.views, 64, 384, 10, rng)
    scene, decoder = fit_scene(small.views, small.images, maps, FitConfig(iterations=2, feature_dim=64, densify=False),
                               init)
    assert decoder.kernel.shape == (384, 64, 3, 3)
    assert scene.features.shape == (10, 64)


def _trajectory(ds, cfg, init):
    traj = []
    fit_scene(ds.views, ds.images, ds.feature_maps, cfg, init,
              on_step=lambda it, s: traj.append({k: v.copy() for k, v in s.params().items()}
                                                | {"kernel": s.decoder.kernel.copy(), "bias": s.decoder.bias.copy()}))
    return traj


GEOMETRY = ("means", "log_scales", "quats", "opacity_logits", "sh")


def test_routing_feature_loss_off(small):
    init = _init(small)
    full = _trajectory(small, _cfg(), init)
    no_feat = _trajectory(small, _cfg(feature_weight=0.0), init)
    for a, b in zip(full, no_feat):
        for k in GEOMETRY:
            assert np.array_equal(a[k], b[k])
    for step in no_feat:
        assert np.array_equal(step["features"], init.features)
        assert np.array_equal(step["kernel"], init.decoder.kernel)
        assert np.array_equal(step["bias"], init.decoder.bias)


def test_routing_rgb_loss_off(small):
    init = _init(small)
    traj = _trajectory(small, _cfg(rgb_weight=0.0), init)
    for step in traj:
        for k in GEOMETRY:
            assert np.array_equal(step[k], getattr(init, k))
    assert not np.array_equal(traj[-1]["features"], init.features)


def test_zero_feature_maps_pull_features_down(small):
    init = _init(small)
    zeros = [np.zeros_like(m) for m in small.feature_maps]
    cfg = _cfg(iterations=60, lr_feature=2e-2, lr_decoder=2e-2)
    scene, dec = fit_scene(small.views, small.images, zeros, cfg, init)
    rgb_only, _ = fit_scene(small.views, small.images, zeros, _cfg(iterations=60, feature_weight=0.0), init)
    assert np.abs(scene.features).mean() < np.abs(init.features).mean()
    for k in GEOMETRY:
        assert np.array_equal(getattr(scene, k), getattr(rgb_only, k))


def test_fit_deterministic(small):
    init = _init(small)
    a, _ = fit_scene(small.views, small.images, small.feature_maps, _cfg(densify=True, densify_from=2,
                                                                          densify_interval=5), init)
    b, _ = fit_scene(small.views, small.images, small.feature_maps, _cfg(densify=True, densify_from=2,
                                                                          densify_interval=5), init)
    assert a.fingerprint() == b.fingerprint()


def test_loss_decreases_and_records(small):
    records = []
    fit_scene(small.views, small.images, small.feature_maps, _cfg(iterations=200, log_every=100), _init(small),
              callback=records.append)
    assert [r["iteration"] for r in records] == [100, 200]
    assert records[1]["loss_rgb"] < records[0]["loss_rgb"]
    assert records[1]["loss_feat"] < records[0]["loss_feat"]


def test_divergence_detected(small):
    bad = [im.copy() for im in small.images]
    bad[0][0, 0, 0] = np.nan
    bad[1][0, 0, 0] = np.nan
    bad[2][0, 0, 0] = np.nan
    bad[3][0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        fit_scene(small.views, bad, small.feature_maps, _cfg(iterations=3), _init(small))


def test_densify_toggle_off_keeps_scene():
    scene = make_scene(6, seed=1)
    stats = GradStats(np.ones(6), np.ones(6))
    out, origin = densify_and_prune(scene, stats, FitConfig(densify=False))
    assert out is scene and np.array_equal(origin, np.arange(6))


def test_prune_low_opacity():
    scene = make_scene(4, seed=2)
    scene.opacity_logits[1] = logit(0.001)
    out, origin = densify_and_prune(scene, GradStats.zeros(4), FitConfig())
    assert len(out) == 3 and 1 not in origin


def test_split_children_inherit_features():
    scene = make_scene(3, feature_dim=5, seed=3, scale=(0.3, 0.4))
    stats = GradStats(np.array([0.0, 1.0, 0.0]), np.ones(3))
    out, origin = densify_and_prune(scene, stats, FitConfig(), extent=1.0, rng=np.random.default_rng(0))
    assert len(out) == 4
    kids = np.flatnonzero(origin == -1)
    assert len(kids) == 2
    for k in kids:
        assert np.array_equal(out.features[k], scene.features[1])
        assert np.allclose(out.log_scales[k], scene.log_scales[1] - np.log(1.6))


def test_clone_small_splats():
    scene = make_scene(2, feature_dim=2, seed=4, scale=(0.001, 0.002))
    stats = GradStats(np.array([1.0, 0.0]), np.ones(2))
    out, origin = densify_and_prune(scene, stats, FitConfig(), extent=1.0)
    assert len(out) == 3 and np.array_equal(out.means[2], scene.means[0])
