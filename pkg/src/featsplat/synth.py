"""Synthetic multi-view scenes with known geometry and feature maps.

The "2D feature extractor" of a synthetic dataset is simulated by
rendering the ground-truth Gaussians' features and pushing them through a
fixed random 3x3 convolution, so the true per-Gaussian features are not
directly what the maps contain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import rasterize_features, rasterize_rgb
from .scene import CameraView, FeatureDecoder, Scene, axis_angle_quat, decoder_apply, logit, num_sh_coeffs
from .sh import SH_C0


@dataclass
class SyntheticDataset:
    scene: Scene  # ground truth; its decoder is the identity
    map_decoder: FeatureDecoder  # produces the "extractor" feature maps
    views: list
    images: list
    feature_maps: list

    def split(self, holdout: int):
        """Training views and the last ``holdout`` views kept aside."""
        n = len(self.views) - holdout
        return (self.views[:n], self.images[:n], self.feature_maps[:n]), (
            self.views[n:], self.images[n:], self.feature_maps[n:])


def random_scene(num: int, feature_dim: int, rng: np.random.Generator, sh_degree: int = 1,
                 radius: float = 0.6, color_to_feature: np.ndarray | None = None) -> Scene:
    """Opaque-ish, mostly diffuse blobs packed inside a ball.

    Features are a fixed linear function of each blob's base colour plus a
    little noise, so an image encoder can in principle predict them.
    """
    d = rng.normal(size=(num, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    means = d * radius * rng.uniform(0.0, 1.0, size=(num, 1)) ** (1 / 3)
    log_scales = np.log(rng.uniform(0.12, 0.3, size=(num, 3)))
    quats = np.stack([axis_angle_quat(rng.normal(size=3), rng.uniform(0, np.pi)) for _ in range(num)])
    opacity_logits = logit(rng.uniform(0.6, 0.95, size=num))
    base = rng.uniform(0.1, 0.9, size=(num, 3))
    sh = np.zeros((num, num_sh_coeffs(sh_degree), 3))
    sh[:, 0] = (base - 0.5) / SH_C0
    if sh_degree > 0:
        sh[:, 1:] = rng.normal(0.0, 0.05, size=(num, num_sh_coeffs(sh_degree) - 1, 3))
    if color_to_feature is None:
        color_to_feature = rng.normal(size=(3, feature_dim))
    features = (base - 0.5) @ color_to_feature + 0.1 * rng.normal(size=(num, feature_dim))
    return Scene(means, log_scales, quats, opacity_logits, sh, features, FeatureDecoder.identity(feature_dim),
                 sh_degree)


def orbit_views(num: int, width: int, height: int, rng: np.random.Generator | None = None, distance: float = 2.6,
                fov_deg: float = 50.0, jitter: float = 0.0) -> list[CameraView]:
    """Cameras on a slightly inclined ring, all looking at the origin."""
    views = []
    for i in range(num):
        phi = 2 * np.pi * i / num
        if rng is not None and jitter:
            phi += rng.uniform(-jitter, jitter)
        elev = 0.35 * np.sin(3 * phi)
        eye = distance * np.array([np.cos(elev) * np.sin(phi), -np.sin(elev), -np.cos(elev) * np.cos(phi)])
        views.append(CameraView.look_at(eye, np.zeros(3), width, height, fov_deg=fov_deg))
    return views


def make_dataset(num_gaussians: int = 20, feature_dim: int = 8, num_views: int = 10, width: int = 64,
                 height: int = 64, feature_size: tuple[int, int] | None = None, map_channels: int | None = None,
                 seed: int = 0, sh_degree: int = 1, color_to_feature: np.ndarray | None = None) -> SyntheticDataset:
    """Render a random ground-truth scene from ``num_views`` orbit cameras.

    ``feature_size`` is the ``(width, height)`` of the feature maps,
    defaulting to a quarter of the image resolution.
    """
    rng = np.random.default_rng(seed)
    scene = random_scene(num_gaussians, feature_dim, rng, sh_degree=sh_degree, color_to_feature=color_to_feature)
    map_decoder = FeatureDecoder.init(feature_dim, map_channels or feature_dim, rng)
    map_decoder.kernel *= 3.0
    map_decoder.bias = rng.normal(0.0, 0.1, size=map_decoder.out_channels)
    fw, fh = feature_size or (max(width // 4, 1), max(height // 4, 1))
    views = orbit_views(num_views, width, height, rng, jitter=0.1)
    images, maps = [], []
    for v in views:
        images.append(np.clip(rasterize_rgb(scene, v).image, 0.0, 1.0))
        maps.append(decoder_apply(map_decoder, rasterize_features(scene, v, fw, fh).image))
    return SyntheticDataset(scene, map_decoder, views, images, maps)


def perturb_scene(scene: Scene, rng: np.random.Generator, position: float = 0.03, log_scale: float = 0.1,
                  color: float = 0.1, feature_dim: int | None = None, decoder_out: int | None = None) -> Scene:
    """Noisy copy of the geometry with fresh random features and decoder."""
    out = scene.copy()
    n = len(out)
    out.means = out.means + rng.normal(0.0, position, size=(n, 3))
    out.log_scales = out.log_scales + rng.normal(0.0, log_scale, size=(n, 3))
    out.sh[:, 0] += rng.normal(0.0, color / SH_C0, size=(n, 3))
    D = feature_dim or scene.feature_dim
    out.features = rng.uniform(0.0, 1.0, size=(n, D))
    out.decoder = FeatureDecoder.init(D, decoder_out or scene.decoder.out_channels, rng)
    return out


def render_depth(scene: Scene, cam: CameraView):
    """Alpha-normalised expected camera depth and accumulated opacity per pixel."""
    probe = scene.copy()
    z = scene.means @ cam.rotation[2] + cam.translation[2]
    probe.features = z[:, None]
    probe.decoder = FeatureDecoder.identity(1)
    out = rasterize_features(probe, cam)
    acc = 1.0 - out.transmittance
    depth = np.where(acc > 0, out.image[..., 0] / np.maximum(acc, 1e-12), np.inf)
    return depth, acc


def correspondences(scene: Scene, cam_a: CameraView, cam_b: CameraView, stride: int = 4,
                    min_opacity: float = 0.95, depth_tol: float = 0.03):
    """Pixel pairs that observe the same surface point in two views.

    Pixels of view A on a sampling lattice are lifted to 3D with the rendered
    depth, projected into B, and kept when B sees them unoccluded (its own
    rendered depth agrees within ``depth_tol`` relative).
    """
    depth_a, acc_a = render_depth(scene, cam_a)
    depth_b, acc_b = render_depth(scene, cam_b)
    vs, us = np.mgrid[stride // 2:cam_a.height:stride, stride // 2:cam_a.width:stride]
    us, vs = us.ravel(), vs.ravel()
    ok = acc_a[vs, us] >= min_opacity
    us, vs = us[ok], vs[ok]
    z = depth_a[vs, us]
    px = np.column_stack([us + 0.5, vs + 0.5])
    cam_pts = np.column_stack([(px[:, 0] - cam_a.cx) / cam_a.fx * z, (px[:, 1] - cam_a.cy) / cam_a.fy * z, z])
    world = (cam_pts - cam_a.translation) @ cam_a.rotation
    uv_b, z_b = cam_b.project_points(world)
    ub, vb = np.floor(uv_b[:, 0]).astype(int), np.floor(uv_b[:, 1]).astype(int)
    inside = (z_b > 0) & (ub >= 0) & (ub < cam_b.width) & (vb >= 0) & (vb < cam_b.height)
    keep = np.zeros(len(px), dtype=bool)
    ib = np.flatnonzero(inside)
    seen = (acc_b[vb[ib], ub[ib]] >= min_opacity) & (
        np.abs(depth_b[vb[ib], ub[ib]] - z_b[ib]) <= depth_tol * z_b[ib])
    keep[ib[seen]] = True
    return px[keep], uv_b[keep]


def distilled_library(extractor, num_scenes: int = 4, num_views: int = 12, holdout: int = 3, size: int = 112,
                      feature_dim: int = 8, iterations: int = 800, seed: int = 0, fit_geometry: bool = False):
    """Scene library whose targets were distilled from ``extractor``'s own 2D features.

    Every scene is rendered from ``num_views`` cameras; the extractor's patch
    features of the first ``num_views - holdout`` views supervise a feature
    fit, the remaining views are held out. Unless ``fit_geometry`` is set the
    ground-truth geometry is kept fixed and only features and decoder are
    optimised (the RGB loss is switched off).

    Returns ``(library, datasets, train_entries, heldout_entries)``.
    """
    from .extractor import SceneLibrary
    from .trainer import FitConfig, fit_scene

    datasets, scenes = [], []
    n_train = num_views - holdout
    for k in range(num_scenes):
        ds = make_dataset(20, feature_dim, num_views, size, size, seed=seed + k)
        maps = [extractor.extract(im)[0] for im in ds.images[:n_train]]
        rng = np.random.default_rng(seed + 1000 + k)
        pos = 0.03 if fit_geometry else 0.0
        init = perturb_scene(ds.scene, rng, position=pos, log_scale=pos, color=pos, decoder_out=extractor.out_dim)
        cfg = FitConfig(
            iterations=iterations, feature_dim=feature_dim, allow_any_feature_dim=True, densify=False,
            rgb_weight=1.0 if fit_geometry else 0.0, lr_feature=1e-2, lr_decoder=1e-2, seed=seed + k,
        )
        scene, _ = fit_scene(ds.views[:n_train], ds.images[:n_train], maps, cfg, init)
        datasets.append(ds)
        scenes.append(scene)
    gh, gw = extractor.grid_shape(size, size)
    lib = SceneLibrary(scenes, [d.views for d in datasets], [d.images for d in datasets], [(gw, gh)] * num_scenes)
    train = [(k, i) for k in range(num_scenes) for i in range(n_train)]
    held = [(k, i) for k in range(num_scenes) for i in range(n_train, num_views)]
    return lib, datasets, train, held


def heldout_pairs(datasets, held_entries):
    """All pairs of held-out views within each scene, as ``((cam, image), (cam, image))``."""
    per_scene = {}
    for k, i in held_entries:
        per_scene.setdefault(k, []).append(i)
    pairs = []
    for k, idx in sorted(per_scene.items()):
        ds = datasets[k]
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                i, j = idx[a], idx[b]
                pairs.append((k, (ds.views[i], ds.images[i]), (ds.views[j], ds.images[j])))
    return pairs
