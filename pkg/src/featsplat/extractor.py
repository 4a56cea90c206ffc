"""2D feature extractors and 3D-aware fine-tuning against rendered features.

Two extractor kinds exist. ``ToyPatchEncoder`` is a small differentiable
patch encoder with hand-written gradients, used at desk scale in place of
a ViT. ``FileBackedExtractor`` serves precomputed feature maps (e.g. dumped
from a foundation model) and cannot be trained.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .image import bilinear_resize, hflip, sample_grid
from .optim import AdamW
from .raster import rasterize_features
from .scene import CameraView, Scene, decoder_apply

log = logging.getLogger(__name__)


class UnsupportedOperationError(RuntimeError):
    pass


class FeatureExtractor:
    kind: str = "abstract"
    patch_size: int
    out_dim: int

    @property
    def trainable(self) -> bool:
        return False

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        return height // self.patch_size, width // self.patch_size

    def extract(self, image: np.ndarray):
        """Return ``(patch_grid_features, global_token)`` for an ``(H, W, 3)`` image."""
        raise NotImplementedError


# ---------------------------------------------------------------------------
# toy encoder


def _mix3x3(u: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of each cell's 3x3 neighbourhood (zero padded), shared over channels."""
    gh, gw, _ = u.shape
    up = np.pad(u, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros_like(u)
    for a in range(3):
        for b in range(3):
            out += weights[a, b] * up[a:a + gh, b:b + gw]
    return out


def _mix3x3_backward(u: np.ndarray, weights: np.ndarray, grad: np.ndarray):
    gh, gw, _ = u.shape
    up = np.pad(u, ((1, 1), (1, 1), (0, 0)))
    gp = np.pad(grad, ((1, 1), (1, 1), (0, 0)))
    d_w = np.empty((3, 3))
    d_u = np.zeros_like(u)
    for a in range(3):
        for b in range(3):
            d_w[a, b] = np.sum(grad * up[a:a + gh, b:b + gw])
            d_u += weights[a, b] * gp[2 - a:2 - a + gh, 2 - b:2 - b + gw]
    return d_u, d_w


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    H, W, C = image.shape
    gh, gw = H // patch, W // patch
    x = image[:gh * patch, :gw * patch].reshape(gh, patch, gw, patch, C)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh, gw, patch * patch * C)


class ToyPatchEncoder(FeatureExtractor):
    """Linear patch embedding, two residual mixing blocks, linear head.

    Each block is ``E += mix3x3(tanh(E @ W + b))``. The global token is a
    linear projection of the mean patch embedding.
    """

    kind = "toy-patch-encoder"
    PARAM_NAMES = ("patch_w", "patch_b", "w1", "b1", "mix1", "w2", "b2", "mix2", "head_w", "head_b",
                   "global_w", "global_b")

    def __init__(self, params: dict[str, np.ndarray], patch_size: int = 14):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        missing = set(self.PARAM_NAMES) - set(self.params)
        if missing:
            raise ValueError(f"missing encoder parameters: {sorted(missing)}")
        self.patch_size = int(patch_size)
        self.out_dim = self.params["head_w"].shape[1]

    @classmethod
    def init(cls, out_dim: int = 64, patch_size: int = 14, seed: int = 0, hidden: int | None = None):
        rng = np.random.default_rng(seed)
        C = hidden or out_dim
        pdim = patch_size * patch_size * 3
        p = {
            "patch_w": rng.normal(0, 1 / np.sqrt(pdim), size=(pdim, C)),
            "patch_b": np.zeros(C),
            "head_w": rng.normal(0, 1 / np.sqrt(C), size=(C, out_dim)),
            "head_b": np.zeros(out_dim),
            "global_w": rng.normal(0, 1 / np.sqrt(C), size=(C, out_dim)),
            "global_b": np.zeros(out_dim),
        }
        for k in (1, 2):
            p[f"w{k}"] = rng.normal(0, 0.5 / np.sqrt(C), size=(C, C))
            p[f"b{k}"] = np.zeros(C)
            p[f"mix{k}"] = rng.uniform(-0.2, 0.2, size=(3, 3))
        return cls(p, patch_size)

    @property
    def trainable(self) -> bool:
        return True

    def copy(self) -> "ToyPatchEncoder":
        return ToyPatchEncoder({k: v.copy() for k, v in self.params.items()}, self.patch_size)

    def _check(self, image):
        H, W = image.shape[:2]
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {image.shape}")
        if H % self.patch_size or W % self.patch_size:
            raise ValueError(f"image size {W}x{H} is not divisible by patch size {self.patch_size}")

    def forward(self, image: np.ndarray):
        self._check(image)
        p = self.params
        x = patchify(np.asarray(image, dtype=np.float64), self.patch_size)
        e = x @ p["patch_w"] + p["patch_b"]
        acts = []
        for k in (1, 2):
            u = np.tanh(e @ p[f"w{k}"] + p[f"b{k}"])
            acts.append((e, u))
            e = e + _mix3x3(u, p[f"mix{k}"])
        out = e @ p["head_w"] + p["head_b"]
        pooled = e.mean(axis=(0, 1))
        glob = pooled @ p["global_w"] + p["global_b"]
        return out, glob, (x, acts, e, pooled)

    def extract(self, image: np.ndarray):
        out, glob, _ = self.forward(image)
        return out, glob

    def backward(self, cache, d_out: np.ndarray, d_glob: np.ndarray | None = None) -> dict[str, np.ndarray]:
        p = self.params
        x, acts, e, pooled = cache
        g = {}
        g["head_w"] = np.einsum("hwc,hwo->co", e, d_out)
        g["head_b"] = d_out.sum(axis=(0, 1))
        d_e = d_out @ p["head_w"].T
        if d_glob is None:
            d_glob = np.zeros(p["global_b"].shape)
        g["global_w"] = np.outer(pooled, d_glob)
        g["global_b"] = d_glob.copy()
        d_e = d_e + (p["global_w"] @ d_glob) / (e.shape[0] * e.shape[1])
        for k in (2, 1):
            e_in, u = acts[k - 1]
            d_u, g[f"mix{k}"] = _mix3x3_backward(u, p[f"mix{k}"], d_e)
            d_a = d_u * (1.0 - u * u)
            g[f"w{k}"] = np.einsum("hwc,hwo->co", e_in, d_a)
            g[f"b{k}"] = d_a.sum(axis=(0, 1))
            d_e = d_e + d_a @ p[f"w{k}"].T
        g["patch_w"] = np.einsum("hwi,hwo->io", x, d_e)
        g["patch_b"] = d_e.sum(axis=(0, 1))
        return g


# ---------------------------------------------------------------------------
# precomputed features


def image_key(image: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(image, dtype=np.float64).tobytes(), digest_size=16).hexdigest()


class FileBackedExtractor(FeatureExtractor):
    """Looks up precomputed patch features registered per image.

    Images are identified either by an explicit key (usually the image path)
    or by a digest of their pixel values.
    """

    kind = "file-backed"

    def __init__(self, out_dim: int, patch_size: int = 14):
        self.out_dim = int(out_dim)
        self.patch_size = int(patch_size)
        self._maps: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def register(self, key, feature_map: np.ndarray, global_token: np.ndarray | None = None) -> None:
        if not isinstance(key, str):
            key = image_key(key)
        feature_map = np.asarray(feature_map)
        if feature_map.ndim != 3 or feature_map.shape[2] != self.out_dim:
            raise ValueError(f"feature map must be (h, w, {self.out_dim}), got {feature_map.shape}")
        if global_token is None:
            global_token = feature_map.mean(axis=(0, 1))
        self._maps[key] = (feature_map, np.asarray(global_token))

    def extract(self, image, key: str | None = None):
        k = key if key is not None else (image if isinstance(image, str) else image_key(image))
        try:
            return self._maps[k]
        except KeyError:
            raise KeyError(f"no feature map registered for image {k!r}") from None


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class SceneLibrary:
    """Fitted scenes kept in memory together with their posed training images.

    ``feature_sizes[k]`` is the ``(width, height)`` grid at which scene ``k``
    renders its feature targets.
    """

    scenes: list
    views: list  # per scene: list[CameraView]
    images: list  # per scene: list[(H, W, 3) array]
    feature_sizes: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.scenes) == len(self.views) == len(self.images)):
            raise ValueError("scenes, views and images must have equal length")
        for k, (vs, ims) in enumerate(zip(self.views, self.images)):
            if len(vs) != len(ims):
                raise ValueError(f"scene {k}: {len(vs)} views but {len(ims)} images")
        if not self.feature_sizes:
            self.feature_sizes = [None] * len(self.scenes)

    def __len__(self) -> int:
        return sum(len(v) for v in self.views)

    def entries(self) -> list[tuple[int, int]]:
        return [(k, i) for k, vs in enumerate(self.views) for i in range(len(vs))]

    def render_target(self, scene_idx: int, view_idx: int) -> np.ndarray:
        """Decoded high-dimensional feature render for one library view."""
        scene = self.scenes[scene_idx]
        cam: CameraView = self.views[scene_idx][view_idx]
        size = self.feature_sizes[scene_idx] or (cam.width, cam.height)
        low = rasterize_features(scene, cam, size[0], size[1]).image
        return decoder_apply(scene.decoder, low)

    def subset(self, entries) -> "SceneLibrary":
        """Library restricted to ``entries`` (keeps every scene, drops other views)."""
        keep = {}
        for k, i in entries:
            keep.setdefault(k, []).append(i)
        views = [[self.views[k][i] for i in keep.get(k, [])] for k in range(len(self.scenes))]
        images = [[self.images[k][i] for i in keep.get(k, [])] for k in range(len(self.scenes))]
        return SceneLibrary(self.scenes, views, images, list(self.feature_sizes))


@dataclass
class FinetuneConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 2
    epochs: int = 1
    hflip: bool = True
    seed: int = 0
    max_steps: int | None = None  # stop early (0 leaves the extractor untouched)
    prefetch: int = 2

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def target_for_grid(target: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    return bilinear_resize(target, grid_h, grid_w)


def l1_to_target(e: FeatureExtractor, image: np.ndarray, target: np.ndarray) -> float:
    out, _ = e.extract(image)
    return float(np.abs(out - target_for_grid(target, *out.shape[:2])).mean())


def epoch_schedule(n: int, cfg: FinetuneConfig, rng: np.random.Generator):
    """Shuffled batches covering every entry once, with per-sample flip flags."""
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5 if cfg.hflip else np.zeros(n, dtype=bool)
    return [(order[i:i + cfg.batch_size], flips[i:i + cfg.batch_size]) for i in range(0, n, cfg.batch_size)]


def finetune(e: FeatureExtractor, lib: SceneLibrary, cfg: FinetuneConfig | None = None, callback=None):
    """Fine-tune a trainable extractor on features rendered from ``lib``.

    Targets are rendered on the fly, resized to the extractor's patch grid
    and compared with an L1 loss; only the extractor's parameters move.
    """
    cfg = cfg or FinetuneConfig()
    cfg.validate()
    if not e.trainable:
        raise UnsupportedOperationError(f"{e.kind} extractors cannot be fine-tuned")
    if len(lib) == 0:
        raise ValueError("scene library is empty")
    model = e.copy()
    opt = AdamW({k: cfg.lr for k in model.params}, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    entries = lib.entries()
    steps = 0

    def render(batch):
        return [lib.render_target(*entries[j]) for j in batch]

    with ThreadPoolExecutor(max_workers=1) as pool:
        for epoch in range(cfg.epochs):
            schedule = epoch_schedule(len(entries), cfg, rng)
            # at most ``prefetch`` batches of targets are rendered ahead
            pending = [pool.submit(render, b) for b, _ in schedule[:cfg.prefetch]]
            for bi, (batch, flips) in enumerate(schedule):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                targets = pending.pop(0).result()
                nxt = bi + cfg.prefetch
                if nxt < len(schedule):
                    pending.append(pool.submit(render, schedule[nxt][0]))
                grads = {k: np.zeros_like(v) for k, v in model.params.items()}
                loss = 0.0
                for j, flip, target in zip(batch, flips, targets):
                    k, i = entries[j]
                    image = lib.images[k][i]
                    if flip:
                        image, target = hflip(image), hflip(target)
                    out, _, cache = model.forward(image)
                    tgt = target_for_grid(target, *out.shape[:2])
                    diff = out - tgt
                    loss += np.abs(diff).mean() / len(batch)
                    g = model.backward(cache, np.sign(diff) / (diff.size * len(batch)))
                    for name in grads:
                        grads[name] += g[name]
                opt.step(model.params, grads)
                steps += 1
                if callback is not None:
                    callback({"epoch": epoch, "step": steps, "loss": float(loss)})
            for f in pending:
                f.cancel()
    return model


def mean_target_l1(e: FeatureExtractor, lib: SceneLibrary, entries=None) -> float:
    entries = lib.entries() if entries is None else entries
    return float(np.mean([l1_to_target(e, lib.images[k][i], lib.render_target(k, i)) for k, i in entries]))


def multiview_consistency(e: FeatureExtractor, scene: Scene | None, view_pairs, pixel_correspondences=None) -> float:
    """Mean cosine distance between features at corresponding pixels.

    ``view_pairs`` holds ``((cam_a, image_a), (cam_b, image_b))`` tuples.
    When ``pixel_correspondences`` is omitted they are derived from
    ``scene``: pixels lifted with its rendered depth that the other view
    sees unoccluded.
    """
    from .synth import correspondences

    dists = []
    for n, ((cam_a, img_a), (cam_b, img_b)) in enumerate(view_pairs):
        if pixel_correspondences is None:
            if scene is None:
                raise ValueError("need a scene or explicit correspondences")
            uv_a, uv_b = correspondences(scene, cam_a, cam_b)
        else:
            uv_a, uv_b = (np.asarray(x, dtype=np.float64).reshape(-1, 2) for x in pixel_correspondences[n])
        if len(uv_a) == 0:
            continue
        fa = sample_grid(e.extract(img_a)[0], uv_a, e.patch_size)
        fb = sample_grid(e.extract(img_b)[0], uv_b, e.patch_size)
        na = np.linalg.norm(fa, axis=1)
        nb = np.linalg.norm(fb, axis=1)
        cos = np.sum(fa * fb, axis=1) / np.maximum(na * nb, 1e-12)
        dists.append(1.0 - cos)
    if not dists:
        raise ValueError("correspondence set is empty")
    return float(np.mean(np.concatenate(dists)))
