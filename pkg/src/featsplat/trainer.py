"""Per-scene fitting of feature Gaussians.

Colour and feature supervision are kept apart: geometry, opacity and SH
only ever see gradients of the RGB loss, while the feature vectors and the
decoder only see gradients of the feature loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .losses import loss_feat, loss_rgb, psnr
from .optim import Adam, AdamW, exponential_lr
from .raster import rasterize_backward, rasterize_features, rasterize_rgb
from .scene import DEFAULT_FEATURE_DIMS, CameraView, ConfigurationError, FeatureDecoder, Scene, decoder_apply, \
    decoder_backward, logit



class DivergenceError(RuntimeError):
    pass


@dataclass
class FitConfig:
    iterations: int = 30000
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_feature: float = 2.5e-3
    lr_decoder: float = 1e-3
    decoder_weight_decay: float = 1e-4
    lambda_dssim: float = 0.2
    feature_dim: int = 64
    allow_any_feature_dim: bool = False
    # a zero weight switches the loss off together with the updates it drives
    rgb_weight: float = 1.0
    feature_weight: float = 1.0
    densify: bool = True
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    background: tuple = (0.0, 0.0, 0.0)
    log_every: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ConfigurationError("iterations must be positive")
        if not 0.0 <= self.lambda_dssim <= 1.0:
            raise ConfigurationError("lambda_dssim must lie in [0, 1]")
        if self.rgb_weight < 0 or self.feature_weight < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.rgb_weight == 0 and self.feature_weight == 0:
            raise ConfigurationError("rgb_weight and feature_weight are both zero; nothing to optimise")
        if self.feature_dim <= 0:
            raise ConfigurationError("feature_dim must be positive")
        if self.feature_dim not in DEFAULT_FEATURE_DIMS and not self.allow_any_feature_dim:
            raise ConfigurationError(
                f"feature_dim {self.feature_dim} not in {DEFAULT_FEATURE_DIMS}; set allow_any_feature_dim to override"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GradStats:
    """Running screen-space gradient magnitude per splat, for densification."""

    accum: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, mean2d_grad: np.ndarray, visible: np.ndarray, width: int, height: int) -> None:
        # pixel -> NDC gradient, so thresholds do not depend on resolution
        g = mean2d_grad * np.array([0.5 * width, 0.5 * height])
        self.accum[visible] += np.linalg.norm(g[visible], axis=1)
        self.count[visible] += 1

    def average(self) -> np.ndarray:
        return np.where(self.count > 0, self.accum / np.maximum(self.count, 1), 0.0)


def scene_extent(views) -> float:
    centers = np.stack([v.center for v in views])
    return 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))


def densify_and_prune(scene: Scene, grad_stats: GradStats, config: FitConfig, extent: float = 1.0,
                      rng: np.random.Generator | None = None):
    """Clone/split high-gradient splats and drop nearly transparent ones.

    Returns the new scene and, for each of its rows, the row of ``scene`` it
    was carried over from (``-1`` for newly created splats).
    """
    n = len(scene)
    if not config.densify:
        return scene, np.arange(n)
    rng = rng or np.random.default_rng(config.seed)
    avg = grad_stats.average()
    hot = avg >= config.densify_grad_threshold
    big = scene.scales.max(axis=1) > config.percent_dense * extent
    clone = hot & ~big
    split = hot & big

    parts = [scene.select(~split)]
    origin = [np.flatnonzero(~split)]
    if clone.any():
        parts.append(scene.select(clone))
        origin.append(np.full(int(clone.sum()), -1))
    if split.any():
        idx = np.flatnonzero(split)
        children = scene.select(np.repeat(idx, 2))
        cov = children.covariances()
        offsets = np.einsum("nij,nj->ni", np.linalg.cholesky(cov), rng.standard_normal((len(children), 3)))
        children.means = children.means + offsets
        children.log_scales = children.log_scales - np.log(0.8 * 2)
        parts.append(children)
        origin.append(np.full(len(children), -1))

    merged = Scene(
        np.concatenate([p.means for p in parts]),
        np.concatenate([p.log_scales for p in parts]),
        np.concatenate([p.quats for p in parts]),
        np.concatenate([p.opacity_logits for p in parts]),
        np.concatenate([p.sh for p in parts]),
        np.concatenate([p.features for p in parts]),
        scene.decoder, scene.sh_degree,
    )
    origin = np.concatenate(origin)
    alive = merged.opacities >= config.prune_opacity
    if not alive.any():
        alive[np.argmax(merged.opacities)] = True
    return merged.select(alive), origin[alive]


def prune(scene: Scene, min_opacity: float = 0.005) -> Scene:
    return scene.select(scene.opacities >= min_opacity)


def _check_inputs(views, images, feat_maps, scene: Scene, config: FitConfig):
    if len(views) < 2:
        raise ConfigurationError("fitting needs at least two views")
    if len(images) != len(views) or len(feat_maps) != len(views):
        raise ConfigurationError("views, images and feature maps must have equal length")
    for i, (v, img, fm) in enumerate(zip(views, images, feat_maps)):
        if fm is None:
            raise ConfigurationError(f"view {i} has no ground-truth feature map ({v.feature_path})")
        if img.shape != (v.height, v.width, 3):
            raise ConfigurationError(f"view {i}: image shape {img.shape} does not match camera")
        if fm.shape[2] != scene.decoder.out_channels:
            raise ConfigurationError(
                f"view {i}: feature map has {fm.shape[2]} channels, decoder outputs {scene.decoder.out_channels}"
            )
    if scene.feature_dim != config.feature_dim:
        raise ConfigurationError(f"initial scene has D={scene.feature_dim}, config asks for {config.feature_dim}")


def fit_scene(views: list[CameraView], images, feat_maps, config: FitConfig, init: Scene,
              callback=None, on_step=None) -> tuple[Scene, FeatureDecoder]:
    """Optimise a feature-Gaussian scene against posed images and feature maps.

    ``callback(record)`` receives a metric dict every ``config.log_every``
    iterations; ``on_step(iteration, scene)`` is called after every update.
    """
    config.validate()
    _check_inputs(views, images, feat_maps, init, config)

    scene = init.copy()
    scene.decoder = scene.decoder.copy()
    view_rng, split_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    extent = scene_extent(views)

    geometry_opt = Adam({
        "means": config.lr_position_init,
        "log_scales": config.lr_scale,
        "quats": config.lr_rotation,
        "opacity_logits": config.lr_opacity,
        "sh": config.lr_sh,
    })
    feature_opt = Adam({"features": config.lr_feature})
    decoder_opt = AdamW({"kernel": config.lr_decoder, "bias": config.lr_decoder},
                        weight_decay=config.decoder_weight_decay)
    stats = GradStats.zeros(len(scene))
    use_rgb = config.rgb_weight > 0
    use_feat = config.feature_weight > 0
    window = {"loss_rgb": [], "loss_feat": [], "psnr": []}

    for it in range(config.iterations):
        v = int(view_rng.integers(len(views)))
        cam = views[v]
        record = {}

        if use_rgb:
            out = rasterize_rgb(scene, cam, background=config.background)
            lc, g_img = loss_rgb(out.image, images[v], config.lambda_dssim)
            g_rgb = rasterize_backward(scene, cam, config.rgb_weight * g_img, out.cache)
            record["loss_rgb"] = lc
            record["psnr"] = psnr(out.image, images[v])
        if use_feat:
            gt = feat_maps[v]
            fout = rasterize_features(scene, cam, gt.shape[1], gt.shape[0])
            f_high = decoder_apply(scene.decoder, fout.image)
            lf, g_high = loss_feat(f_high, gt)
            g_high = config.feature_weight * g_high
            g_low, g_kernel, g_bias = decoder_backward(scene.decoder, fout.image, g_high)
            g_feat = rasterize_backward(scene, None, g_low, fout.cache, geometry=False)
            record["loss_feat"] = lf

        if not all(np.isfinite(x) for x in record.values()):
            raise DivergenceError(f"non-finite loss at iteration {it} (view {v}): {record}")

        if use_rgb:
            geometry_opt.lrs["means"] = exponential_lr(
                it, config.iterations, config.lr_position_init, config.lr_position_final
            )
            grads = g_rgb.as_dict()
            grads.pop("features", None)
            geometry_opt.step(scene.params(), grads)
            if config.densify and it < config.densify_until:
                stats.add(g_rgb.mean2d, out.cache.projection.visible, cam.width, cam.height)
        if use_feat:
            feature_opt.step(scene.params(), {"features": g_feat.features})
            decoder_opt.step({"kernel": scene.decoder.kernel, "bias": scene.decoder.bias},
                             {"kernel": g_kernel, "bias": g_bias})

        step = it + 1
        if (config.densify and use_rgb and config.densify_from < step <= config.densify_until
                and step % config.densify_interval == 0):
            scene, origin = densify_and_prune(scene, stats, config, extent, split_rng)
            for opt in (geometry_opt, feature_opt):
                for name in Scene.PARAM_NAMES:
                    opt.remap(name, origin)
            stats = GradStats.zeros(len(scene))

        if on_step is not None:
            on_step(it, scene)
        for key in window:
            if key in record:
                window[key].append(record[key])
        if callback is not None and (step % config.log_every == 0 or step == config.iterations):
            rec = {"iteration": step, "num_gaussians": len(scene)}
            rec.update({k: float(np.mean(vals)) for k, vals in window.items() if vals})
            callback(rec)
            window = {k: [] for k in window}

    return scene, scene.decoder


def initial_scene_for(views, feature_dim: int, decoder_out: int, num: int, rng: np.random.Generator,
                      sh_degree: int = 3, bbox=None) -> Scene:
    """Random box initialisation; the box defaults to the region the cameras look at."""
    if bbox is None:
        centers = np.stack([v.center for v in views])
        mid = centers.mean(axis=0)
        r = 0.5 * np.max(np.linalg.norm(centers - mid, axis=1))
        bbox = (mid - r, mid + r)
    scene = Scene.random(num, feature_dim, rng, bbox=bbox, sh_degree=sh_degree, decoder_out=decoder_out)
    scene.opacity_logits[:] = logit(0.1)
    return scene
