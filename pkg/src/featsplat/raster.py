"""Tile-binned alpha compositing of RGB and feature splats, with gradients.

The forward pass projects every Gaussian, sorts globally by camera depth,
bins splats into 16x16 tiles, and composites each tile front to back. The
backward pass re-walks the same per-tile lists and chains through the
compositing weights, the 2D covariance, the projection Jacobian, and the
parameter activations.

``rasterize_reference`` is a deliberately naive per-pixel implementation
kept for testing the fast path.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .scene import (
    COV2D_DILATION, NEAR_PLANE, CameraView, Scene, projection_jacobian, quat_to_rotmat, rotmat_quat_jacobian,
)
from .sh import COLOR_OFFSET, sh_basis_and_grad

CULL_SIGMAS = 3.0


class EmptySceneError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """The scene changed between the forward pass and the backward pass."""


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    min_transmittance: float = 1e-4


DEFAULT_SETTINGS = RasterSettings()


def worker_threads() -> int:
    try:
        return max(1, int(os.environ.get("FEATSPLAT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Projection:
    mean2d: np.ndarray  # (M, 2)
    cov2d: np.ndarray  # (M, 2, 2)
    conic: np.ndarray  # (M, 2, 2), inverse of cov2d
    depth: np.ndarray  # (M,)
    cam_points: np.ndarray  # (M, 3)
    jacobian: np.ndarray  # (M, 2, 3)
    cov3d: np.ndarray  # (M, 3, 3)
    opacity: np.ndarray  # (M,)
    support_radius: np.ndarray  # (M,) pixels where alpha can reach alpha_min
    visible: np.ndarray  # (M,) bool
    degenerate: int = 0

    def order(self) -> np.ndarray:
        """Visible splat indices, ascending depth (ties broken by index)."""
        idx = np.flatnonzero(self.visible)
        return idx[np.argsort(self.depth[idx], kind="stable")]


def project_scene(scene: Scene, cam: CameraView, settings: RasterSettings = DEFAULT_SETTINGS) -> Projection:
    W = cam.rotation
    t = scene.means @ W.T + cam.translation
    z = t[:, 2]
    in_front = z > NEAR_PLANE
    z_safe = np.where(in_front, z, 1.0)
    t_safe = np.column_stack([t[:, :2], z_safe])

    cov3d = scene.covariances()
    J = projection_jacobian(t_safe, cam.fx, cam.fy)
    T = J @ W
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2) + COV2D_DILATION * np.eye(2)
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = in_front & (det > 0) & (a > 0)
    degenerate = int(np.count_nonzero(in_front & ~ok))
    det_safe = np.where(ok, det, 1.0)
    conic = np.stack([np.stack([c, -b], -1), np.stack([-b, a], -1)], 1) / det_safe[:, None, None]

    mean2d = np.column_stack([cam.fx * t_safe[:, 0] / z_safe + cam.cx, cam.fy * t_safe[:, 1] / z_safe + cam.cy])
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    sigma = np.sqrt(np.maximum(lam_max, 0.0))

    opacity = scene.opacities
    cull_r = CULL_SIGMAS * sigma
    on_screen = (
        (mean2d[:, 0] + cull_r >= 0) & (mean2d[:, 0] - cull_r <= cam.width)
        & (mean2d[:, 1] + cull_r >= 0) & (mean2d[:, 1] - cull_r <= cam.height)
    )
    # alpha >= alpha_min needs mahalanobis^2 <= 2 ln(op / alpha_min); tiles are binned on that disk
    reach = np.log(np.maximum(opacity, 1e-300) / settings.alpha_min)
    support = np.where(reach > 0, sigma * np.sqrt(2.0 * np.maximum(reach, 0.0)), 0.0)
    visible = ok & on_screen & (reach > 0)
    return Projection(mean2d, cov2d, conic, z, t_safe, J, cov3d, opacity, support + 1.0, visible, degenerate)


def splat_colors(scene: Scene, cam: CameraView) -> np.ndarray:
    """View-dependent RGB for every Gaussian as seen from ``cam``."""
    v = scene.means - cam.center
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    basis, _ = sh_basis_and_grad(dirs, scene.sh_degree)
    return np.maximum(np.einsum("nk,nkc->nc", basis, scene.sh) + COLOR_OFFSET, 0.0)


# ---------------------------------------------------------------------------
# forward


@dataclass
class _Tile:
    pixel_index: np.ndarray  # flat pixel indices into the H*W image
    px: np.ndarray
    py: np.ndarray
    ids: np.ndarray  # splat ids, depth sorted


@dataclass
class ForwardCache:
    mode: str
    camera: CameraView
    fingerprint: str
    projection: Projection
    colors: np.ndarray
    background: np.ndarray
    tiles: list
    n_keep: np.ndarray  # (H*W,) length of the composited prefix per pixel
    transmittance: np.ndarray  # (H*W,)
    settings: RasterSettings


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, C)
    transmittance: np.ndarray  # (H, W) residual transmittance after compositing
    contrib_count: np.ndarray  # (H, W) splats with non-zero weight
    terminated: np.ndarray  # (H, W) early termination fired
    degenerate: int = 0
    cache: ForwardCache | None = field(default=None, repr=False)


def _bin_tiles(proj: Projection, width: int, height: int, tile: int) -> list[_Tile]:
    order = proj.order()
    ntx, nty = -(-width // tile), -(-height // tile)
    m = proj.mean2d[order]
    r = proj.support_radius[order]
    # pixel centres of tile t span [t*tile + 0.5, t*tile + tile - 0.5]
    tx0 = np.clip(np.ceil((m[:, 0] - r - (tile - 0.5)) / tile), 0, ntx - 1).astype(int)
    tx1 = np.clip(np.floor((m[:, 0] + r - 0.5) / tile), -1, ntx - 1).astype(int)
    ty0 = np.clip(np.ceil((m[:, 1] - r - (tile - 0.5)) / tile), 0, nty - 1).astype(int)
    ty1 = np.clip(np.floor((m[:, 1] + r - 0.5) / tile), -1, nty - 1).astype(int)
    tiles = []
    for ty in range(nty):
        y0, y1 = ty * tile, min((ty + 1) * tile, height)
        hit_y = (ty0 <= ty) & (ty <= ty1)
        for tx in range(ntx):
            x0, x1 = tx * tile, min((tx + 1) * tile, width)
            hit = hit_y & (tx0 <= tx) & (tx <= tx1)
            ys, xs = np.mgrid[y0:y1, x0:x1]
            ys, xs = ys.ravel(), xs.ravel()
            tiles.append(_Tile(ys * width + xs, xs + 0.5, ys + 0.5, order[hit]))
    return tiles


def _tile_alpha(tile: _Tile, proj: Projection, settings: RasterSettings):
    ids = tile.ids
    dx = tile.px[:, None] - proj.mean2d[ids, 0][None]
    dy = tile.py[:, None] - proj.mean2d[ids, 1][None]
    Q = proj.conic[ids]
    power = -0.5 * (Q[:, 0, 0] * dx * dx + Q[:, 1, 1] * dy * dy) - Q[:, 0, 1] * dx * dy
    G = np.exp(power)
    raw = proj.opacity[ids][None] * G
    alpha = np.minimum(raw, settings.alpha_max)
    alpha[alpha < settings.alpha_min] = 0.0
    return dx, dy, G, raw, alpha


def _exclusive_cumprod(x: np.ndarray) -> np.ndarray:
    out = np.ones_like(x)
    if x.shape[1] > 1:
        out[:, 1:] = np.cumprod(x[:, :-1], axis=1)
    return out


def _composite_tile(tile: _Tile, proj, colors, background, settings):
    P, K = tile.px.shape[0], tile.ids.shape[0]
    if K == 0:
        img = np.broadcast_to(background, (P, background.shape[0])).copy()
        z = np.zeros(P, dtype=np.int64)
        return img, np.ones(P), z, z, np.zeros(P, dtype=bool)
    _, _, _, _, alpha = _tile_alpha(tile, proj, settings)
    if settings.min_transmittance > 0:
        t_incl = np.cumprod(1.0 - alpha, axis=1)
        keep = np.logical_and.accumulate(t_incl >= settings.min_transmittance, axis=1)
        n_keep = keep.sum(axis=1)
        alpha = alpha * keep
    else:
        n_keep = np.full(P, K, dtype=np.int64)
    t_excl = _exclusive_cumprod(1.0 - alpha)
    weights = alpha * t_excl
    t_final = t_excl[:, -1] * (1.0 - alpha[:, -1])
    img = weights @ colors[tile.ids] + t_final[:, None] * background
    return img, t_final, n_keep, np.count_nonzero(weights, axis=1), n_keep < K


def _render(scene, cam, colors, background, mode, settings) -> RenderOutput:
    if len(scene) == 0:
        raise EmptySceneError("cannot render an empty scene")
    proj = project_scene(scene, cam, settings)
    tiles = _bin_tiles(proj, cam.width, cam.height, settings.tile_size)
    C = colors.shape[1]
    npx = cam.width * cam.height
    img = np.empty((npx, C))
    trans = np.empty(npx)
    n_keep = np.empty(npx, dtype=np.int64)
    count = np.empty(npx, dtype=np.int64)
    term = np.empty(npx, dtype=bool)

    def run(t):
        return _composite_tile(t, proj, colors, background, settings)

    threads = worker_threads()
    if threads > 1 and len(tiles) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, tiles))
    else:
        results = [run(t) for t in tiles]
    for t, (ti, tt, tk, tc, tterm) in zip(tiles, results):
        img[t.pixel_index] = ti
        trans[t.pixel_index] = tt
        n_keep[t.pixel_index] = tk
        count[t.pixel_index] = tc
        term[t.pixel_index] = tterm

    cache = ForwardCache(mode, cam, scene.fingerprint(), proj, colors, background, tiles, n_keep, trans, settings)
    shape = (cam.height, cam.width)
    return RenderOutput(
        img.reshape(shape + (C,)), trans.reshape(shape), count.reshape(shape), term.reshape(shape),
        proj.degenerate, cache,
    )


def rasterize_rgb(scene: Scene, cam: CameraView, background=(0.0, 0.0, 0.0),
                  settings: RasterSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Composite view-dependent colour at the camera's full resolution."""
    colors = splat_colors(scene, cam)
    return _render(scene, cam, colors, np.asarray(background, dtype=np.float64), "rgb", settings)


def rasterize_features(scene: Scene, cam: CameraView, out_width: int | None = None, out_height: int | None = None,
                       settings: RasterSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Composite the per-Gaussian feature vectors into an ``(H, W, D)`` image.

    ``out_width``/``out_height`` pick the render grid; intrinsics are scaled
    to match. The background is the zero vector.
    """
    if out_width is not None or out_height is not None:
        cam = cam.scaled(out_width or cam.width, out_height or cam.height)
    return _render(scene, cam, scene.features, np.zeros(scene.feature_dim), "feature", settings)


def rasterize_reference(scene: Scene, cam: CameraView, out_width: int | None = None, out_height: int | None = None,
                        channel_mode: str = "rgb", background=None,
                        settings: RasterSettings = DEFAULT_SETTINGS) -> RenderOutput:
    """Per-pixel compositing over every visible splat, without tiles or early exit."""
    if out_width is not None or out_height is not None:
        cam = cam.scaled(out_width or cam.width, out_height or cam.height)
    if channel_mode == "rgb":
        colors = splat_colors(scene, cam) if len(scene) else np.zeros((0, 3))
        bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    elif channel_mode == "feature":
        colors = scene.features
        bg = np.zeros(scene.feature_dim)
    else:
        raise ValueError(f"unknown channel mode {channel_mode!r}")
    H, W = cam.height, cam.width
    img = np.tile(bg, (H, W, 1)).astype(np.float64)
    trans = np.ones((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    if len(scene) == 0:
        return RenderOutput(img, trans, count, np.zeros((H, W), dtype=bool))

    proj = project_scene(scene, cam, settings)
    order = proj.order()
    means = proj.mean2d[order]
    conics = proj.conic[order]
    opac = proj.opacity[order]
    cols = colors[order]
    for v in range(H):
        for u in range(W):
            d = np.array([u + 0.5, v + 0.5]) - means
            maha = np.einsum("ki,kij,kj->k", d, conics, d)
            a = np.minimum(opac * np.exp(-0.5 * maha), settings.alpha_max)
            T = 1.0
            acc = np.zeros_like(bg)
            n = 0
            for k in np.flatnonzero(a >= settings.alpha_min):
                acc += cols[k] * (a[k] * T)
                T *= 1.0 - a[k]
                n += 1
            img[v, u] = acc + T * bg
            trans[v, u] = T
            count[v, u] = n
    return RenderOutput(img, trans, count, np.zeros((H, W), dtype=bool), proj.degenerate)


# ---------------------------------------------------------------------------
# backward


@dataclass
class Gradients:
    """Per-parameter gradients for one render.

    ``sh`` is only populated for RGB renders and ``features`` only for
    feature renders; the geometric entries are always present.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray | None = None
    features: np.ndarray | None = None
    mean2d: np.ndarray | None = None  # screen-space mean gradient, for densification

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in vars(self).items() if v is not None and k != "mean2d"}


def _tile_backward(tile, grad, proj, colors, background, n_keep, t_final, settings):
    K = tile.ids.shape[0]
    dx, dy, G, raw, alpha = _tile_alpha(tile, proj, settings)
    keep = np.arange(K)[None] < n_keep[:, None]
    alpha = alpha * keep
    t_excl = _exclusive_cumprod(1.0 - alpha)
    w = alpha * t_excl
    cols = colors[tile.ids]

    d_colors = w.T @ grad
    gc = grad @ cols.T
    wgc = w * gc
    behind = np.cumsum(wgc[:, ::-1], axis=1)[:, ::-1] - wgc
    behind += (t_final * (grad @ background))[:, None]
    d_alpha = t_excl * gc - behind / (1.0 - alpha)
    live = keep & (alpha > 0) & (raw < settings.alpha_max)
    d_raw = np.where(live, d_alpha, 0.0)

    d_opacity = (d_raw * G).sum(axis=0)
    d_power = d_raw * raw
    Q = proj.conic[tile.ids]
    d_mean2d = np.stack(
        [
            (d_power * (Q[:, 0, 0] * dx + Q[:, 0, 1] * dy)).sum(axis=0),
            (d_power * (Q[:, 0, 1] * dx + Q[:, 1, 1] * dy)).sum(axis=0),
        ],
        axis=-1,
    )
    dq00 = -0.5 * (d_power * dx * dx).sum(axis=0)
    dq01 = -0.5 * (d_power * dx * dy).sum(axis=0)
    dq11 = -0.5 * (d_power * dy * dy).sum(axis=0)
    d_conic = np.stack([np.stack([dq00, dq01], -1), np.stack([dq01, dq11], -1)], 1)
    return d_colors, d_opacity, d_mean2d, d_conic


def rasterize_backward(scene: Scene, cam: CameraView | None, upstream_grad: np.ndarray, forward_cache: ForwardCache,
                       geometry: bool = True) -> Gradients:
    """Gradients of ``sum(upstream_grad * image)`` w.r.t. the scene parameters.

    The render camera (including any rescaling) is taken from the cache;
    ``cam`` is accepted for symmetry with the forward calls. With ``geometry=False`` only the channel
    group of the render (SH or features) is differentiated.
    """
    cache = forward_cache
    if cache is None:
        raise ValueError("rasterize_backward needs the cache from the matching forward call")
    if scene.fingerprint() != cache.fingerprint:
        raise StaleCacheError("scene parameters changed since the forward pass")
    cam = cache.camera
    proj = cache.projection
    settings = cache.settings
    M = len(scene)
    C = cache.colors.shape[1]
    grad = np.asarray(upstream_grad, dtype=np.float64).reshape(-1, C)

    d_colors = np.zeros((M, C))
    d_opacity = np.zeros(M)
    d_mean2d = np.zeros((M, 2))
    d_conic = np.zeros((M, 2, 2))

    def run(tile):
        if tile.ids.shape[0] == 0:
            return None
        idx = tile.pixel_index
        return _tile_backward(tile, grad[idx], proj, cache.colors, cache.background,
                              cache.n_keep[idx], cache.transmittance[idx], settings)

    threads = worker_threads()
    if threads > 1 and len(cache.tiles) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, cache.tiles))
    else:
        parts = [run(t) for t in cache.tiles]
    # fixed tile order keeps the reduction deterministic
    for tile, part in zip(cache.tiles, parts):
        if part is None:
            continue
        dc, dop, dm, dq = part
        np.add.at(d_colors, tile.ids, dc)
        np.add.at(d_opacity, tile.ids, dop)
        np.add.at(d_mean2d, tile.ids, dm)
        np.add.at(d_conic, tile.ids, dq)

    out = Gradients(np.zeros((M, 3)), np.zeros((M, 3)), np.zeros((M, 4)), np.zeros(M), mean2d=d_mean2d)
    if cache.mode == "feature":
        out.features = d_colors
    else:
        out.sh = np.zeros_like(scene.sh)
    if not geometry and cache.mode == "feature":
        return out

    vis = proj.visible
    d_means = np.zeros((M, 3))

    if cache.mode == "rgb":
        v = scene.means - cam.center
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        dirs = v / norm
        basis, dbasis = sh_basis_and_grad(dirs, scene.sh_degree)
        raw = np.einsum("nk,nkc->nc", basis, scene.sh) + COLOR_OFFSET
        d_raw = np.where(raw > 0, d_colors, 0.0)
        out.sh = basis[:, :, None] * d_raw[:, None, :]
        if not geometry:
            return out
        d_dirs = np.einsum("nc,nkc,nkj->nj", d_raw, scene.sh, dbasis)
        d_means += (d_dirs - dirs * np.sum(dirs * d_dirs, axis=1, keepdims=True)) / norm

    # opacity activation
    op = proj.opacity
    out.opacity_logits = d_opacity * op * (1.0 - op)

    # conic -> 2D covariance
    Q = proj.conic
    d_cov2d = -Q @ d_conic @ Q

    # 2D covariance -> 3D covariance and projection Jacobian
    W = cam.rotation
    J = proj.jacobian
    T = J @ W
    d_cov3d = np.swapaxes(T, 1, 2) @ d_cov2d @ T
    d_T = 2.0 * d_cov2d @ T @ proj.cov3d
    d_J = d_T @ W.T

    x, y, z = proj.cam_points.T
    fx, fy = cam.fx, cam.fy
    dm = d_mean2d
    d_t = np.empty((M, 3))
    d_t[:, 0] = dm[:, 0] * fx / z - d_J[:, 0, 2] * fx / z**2
    d_t[:, 1] = dm[:, 1] * fy / z - d_J[:, 1, 2] * fy / z**2
    d_t[:, 2] = (
        -dm[:, 0] * fx * x / z**2 - dm[:, 1] * fy * y / z**2
        - d_J[:, 0, 0] * fx / z**2 - d_J[:, 1, 1] * fy / z**2
        + d_J[:, 0, 2] * 2 * fx * x / z**3 + d_J[:, 1, 2] * 2 * fy * y / z**3
    )
    d_means += d_t @ W

    # 3D covariance -> scale and rotation
    q_norm = np.linalg.norm(scene.quats, axis=1, keepdims=True)
    q_hat = scene.quats / q_norm
    R = quat_to_rotmat(q_hat)
    s = scene.scales
    Mmat = R * s[:, None, :]
    d_cov3d = 0.5 * (d_cov3d + np.swapaxes(d_cov3d, 1, 2))
    d_M = 2.0 * d_cov3d @ Mmat
    d_s = np.einsum("nij,nij->nj", d_M, R)
    d_R = d_M * s[:, None, :]
    d_qhat = np.einsum("nij,nijk->nk", d_R, rotmat_quat_jacobian(q_hat))
    d_quat = (d_qhat - q_hat * np.sum(q_hat * d_qhat, axis=1, keepdims=True)) / q_norm

    mask = vis[:, None]
    out.means = np.where(mask, d_means, 0.0)
    out.log_scales = np.where(mask, d_s * s, 0.0)
    out.quats = np.where(mask, d_quat, 0.0)
    out.opacity_logits = np.where(vis, out.opacity_logits, 0.0)
    if out.sh is not None:
        out.sh = np.where(vis[:, None, None], out.sh, 0.0)
    return out
