"""Linear probing of frozen patch features: segmentation, binned depth, metrics, PCA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import bilinear_matrix, bilinear_resize

IGNORE_INDEX = 255
DEPTH_BINS = 256
STRATEGIES = ("concat", "add", "linear-fusion", "concat-self")


# ---------------------------------------------------------------------------
# feature assembly


@dataclass
class AssembledFeatures:
    data: np.ndarray  # (h, w, C)
    strategy: str
    orig_channels: int

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def assemble(orig: np.ndarray, tuned: np.ndarray | None, strategy: str = "concat") -> AssembledFeatures:
    """Combine original and fine-tuned patch features.

    ``linear-fusion`` only stacks the two blocks; the map back to the
    original width is learned together with the probe. ``concat-self``
    duplicates the original features and ignores ``tuned``.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown assembly strategy {strategy!r}; choose from {STRATEGIES}")
    orig = np.asarray(orig, dtype=np.float64)
    C = orig.shape[2]
    if strategy == "concat-self":
        return AssembledFeatures(np.concatenate([orig, orig], axis=2), strategy, C)
    tuned = np.asarray(tuned, dtype=np.float64)
    if orig.shape[:2] != tuned.shape[:2]:
        raise ValueError(f"feature grids differ: {orig.shape[:2]} vs {tuned.shape[:2]}")
    if strategy == "concat":
        return AssembledFeatures(np.concatenate([orig, tuned], axis=2), strategy, C)
    if tuned.shape[2] != C:
        raise ValueError(f"{strategy} needs equal channel counts, got {C} and {tuned.shape[2]}")
    if strategy == "add":
        return AssembledFeatures(orig + tuned, strategy, C)
    return AssembledFeatures(np.concatenate([orig, tuned], axis=2), strategy, C)


def _as_arrays(features):
    return [f.data if isinstance(f, AssembledFeatures) else np.asarray(f, dtype=np.float64) for f in features]


def _fusion_init(features) -> np.ndarray | None:
    f = features[0]
    if isinstance(f, AssembledFeatures) and f.strategy == "linear-fusion":
        C = f.orig_channels
        return 0.5 * np.vstack([np.eye(C), np.eye(C)])
    return None


# ---------------------------------------------------------------------------
# linear heads


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def upsample_logits(logits: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return bilinear_resize(logits, out_h, out_w)


@dataclass
class SegProbe:
    weight: np.ndarray  # (C, K)
    bias: np.ndarray  # (K,)
    fusion: np.ndarray | None = None  # (C_in, C) for linear-fusion assemblies
    norm: tuple | None = None  # per-channel (shift, scale) applied to the input

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        f = _normalize(features, self.norm)
        f = f if self.fusion is None else f @ self.fusion
        if f.shape[2] != self.weight.shape[0]:
            raise ValueError(f"probe expects {self.weight.shape[0]} channels, got {f.shape[2]}")
        return f @ self.weight + self.bias

    def predict(self, features, out_h: int, out_w: int) -> np.ndarray:
        if isinstance(features, AssembledFeatures):
            features = features.data
        return np.argmax(upsample_logits(self.logits(features), out_h, out_w), axis=2)


@dataclass
class DepthProbe:
    weight: np.ndarray  # (2C, 256)
    bias: np.ndarray  # (256,)
    d_min: float
    d_max: float
    norm: tuple | None = None  # per-channel (shift, scale) of the stacked token

    def __post_init__(self):
        if not self.d_min < self.d_max:
            raise ValueError("depth range must satisfy d_min < d_max")
        if self.bias.shape != (DEPTH_BINS,):
            raise ValueError(f"depth probe needs {DEPTH_BINS} bins")

    @property
    def centers(self) -> np.ndarray:
        return bin_centers(self.d_min, self.d_max)

    @staticmethod
    def tokens(features: np.ndarray, global_token: np.ndarray) -> np.ndarray:
        """Each patch token with the global token appended."""
        g = np.asarray(global_token, dtype=np.float64)
        h, w = features.shape[:2]
        return np.concatenate([features, np.broadcast_to(g, (h, w, g.shape[0]))], axis=2)

    def logits(self, features, global_token) -> np.ndarray:
        t = _normalize(self.tokens(features, global_token), self.norm)
        if t.shape[2] != self.weight.shape[0]:
            raise ValueError(f"probe expects {self.weight.shape[0]} input channels, got {t.shape[2]}")
        return t @ self.weight + self.bias


def bin_centers(d_min: float, d_max: float, bins: int = DEPTH_BINS) -> np.ndarray:
    return d_min + (np.arange(bins) + 0.5) * (d_max - d_min) / bins


def depth_from_logits(logits: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Softmax-weighted mean of the bin centres."""
    return softmax(logits, axis=-1) @ bin_centers(d_min, d_max, logits.shape[-1])


def predict_depth(probe: DepthProbe, features, global_token, out_h: int | None = None,
                  out_w: int | None = None) -> np.ndarray:
    if isinstance(features, AssembledFeatures):
        features = features.data
    depth = depth_from_logits(probe.logits(features, global_token), probe.d_min, probe.d_max)
    if out_h is not None:
        depth = bilinear_resize(depth, out_h, out_w)
    return depth


def _normalize(x: np.ndarray, norm) -> np.ndarray:
    if norm is None:
        return x
    shift, scale = norm
    if x.shape[-1] != shift.shape[0]:
        raise ValueError(f"probe expects {shift.shape[0]} input channels, got {x.shape[-1]}")
    return (x - shift) / scale


def fit_norm(inputs) -> tuple:
    """Per-channel mean and standard deviation over every training pixel (unit scale for constant channels)."""
    X = np.concatenate([x.reshape(-1, x.shape[-1]) for x in inputs])
    std = X.std(axis=0)
    return X.mean(axis=0), np.where(std > 1e-12, std, 1.0)


def _poly_lr(lr: float, step: int, total: int, power: float = 0.9) -> float:
    return lr * (1.0 - step / max(total, 1)) ** power


class _SGD:
    def __init__(self, params: dict, momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float):
        for k, g in grads.items():
            b = self.buf[k]
            b *= self.momentum
            b += g
            self.params[k] -= lr * b


def _ce_grad_upsampled(logits, targets, valid, Ay, Ax):
    """Summed cross-entropy of bilinearly upsampled logits and its gradient w.r.t. ``logits``."""
    same = Ay is None
    up = logits if same else np.einsum("oh,hwk,pw->opk", Ay, logits, Ax, optimize=True)
    p = softmax(up, axis=2)
    t = np.where(valid, targets, 0)
    picked = np.take_along_axis(p, t[..., None], axis=2)[..., 0]
    loss = -np.sum(np.log(np.maximum(picked[valid], 1e-300)))
    d_up = p
    np.put_along_axis(d_up, t[..., None], np.take_along_axis(d_up, t[..., None], axis=2) - 1.0, axis=2)
    d_up = d_up * valid[..., None]
    return loss, d_up if same else np.einsum("oh,opk,pw->hwk", Ay, d_up, Ax, optimize=True)


def _train_linear(inputs, targets, valids, num_out, epochs, lr, momentum, fusion, batch_size=None):
    """SGD on a (optionally fused) linear map over mini-batches of images, poly-decayed lr.

    ``batch_size=None`` uses every image in each step (one step per epoch).
    The loss is the mean over all valid pixels of a batch.
    """
    C = inputs[0].shape[2] if fusion is None else fusion.shape[1]
    params = {"weight": np.zeros((C, num_out)), "bias": np.zeros(num_out)}
    if fusion is not None:
        params["fusion"] = fusion.copy()
    opt = _SGD(params, momentum)
    if sum(int(v.sum()) for v in valids) == 0:
        raise ValueError("every label pixel is ignored")
    n = len(inputs)
    bs = n if batch_size is None else max(1, min(batch_size, n))
    batches = [list(range(i, min(i + bs, n))) for i in range(0, n, bs)]
    mats = {}
    total = epochs * len(batches)
    step = 0
    history = []
    for _ in range(epochs):
        epoch_loss, epoch_count = 0.0, 0
        for batch in batches:
            count = sum(int(valids[i].sum()) for i in batch)
            if count == 0:
                continue
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            for i in batch:
                x, y, v = inputs[i], targets[i], valids[i]
                key = (x.shape[:2], y.shape)
                if key not in mats:
                    same = x.shape[:2] == y.shape
                    mats[key] = (None, None) if same else (
                        bilinear_matrix(x.shape[0], y.shape[0]), bilinear_matrix(x.shape[1], y.shape[1]))
                Ay, Ax = mats[key]
                f = x if fusion is None else x @ params["fusion"]
                logits = f @ params["weight"] + params["bias"]
                loss, d_logits = _ce_grad_upsampled(logits, y, v, Ay, Ax)
                d_logits /= count
                grads["weight"] += np.einsum("hwc,hwk->ck", f, d_logits)
                grads["bias"] += d_logits.sum(axis=(0, 1))
                if fusion is not None:
                    grads["fusion"] += np.einsum("hwi,hwc->ic", x, d_logits @ params["weight"].T)
                epoch_loss += loss
            epoch_count += count
            opt.step(grads, _poly_lr(lr, step, total))
            step += 1
        history.append(epoch_loss / max(epoch_count, 1))
    return params, history


def train_seg_probe(features, labels, epochs: int = 50, lr: float = 1.0, num_classes: int | None = None,
                    momentum: float = 0.9, ignore_index: int = IGNORE_INDEX, normalize: bool = True,
                    batch_size: int | None = None) -> SegProbe:
    """Fit a linear segmentation head by per-pixel cross-entropy.

    ``features`` is a list of patch-grid maps (arrays or ``AssembledFeatures``)
    and ``labels`` the matching full-resolution class-id images. Logits are
    bilinearly upsampled to label resolution before the loss. With
    ``normalize`` the inputs are standardised per channel first (statistics
    from the training set, kept in the probe), which keeps plain SGD well
    conditioned.
    """
    fusion = _fusion_init(features)
    inputs = _as_arrays(features)
    norm = fit_norm(inputs) if normalize else None
    inputs = [_normalize(x, norm) for x in inputs]
    labels = [np.asarray(y, dtype=np.int64) for y in labels]
    valids = [y != ignore_index for y in labels]
    if num_classes is None:
        present = np.concatenate([y[v] for y, v in zip(labels, valids)])
        if present.size == 0:
            raise ValueError("every label pixel is ignored")
        num_classes = int(present.max()) + 1
    params, history = _train_linear(inputs, labels, valids, num_classes, epochs, lr, momentum, fusion, batch_size)
    probe = SegProbe(params["weight"], params["bias"], params.get("fusion"), norm)
    probe.history = history
    return probe


def depth_range(depths, lo: float = 1.0, hi: float = 99.0) -> tuple[float, float]:
    vals = np.concatenate([d[valid_depth(d)].ravel() for d in depths])
    d_min, d_max = np.percentile(vals, [lo, hi])
    if d_max <= d_min:
        d_max = d_min + 1e-3
    return float(d_min), float(d_max)


def valid_depth(gt: np.ndarray) -> np.ndarray:
    return np.isfinite(gt) & (gt > 0)


def depth_to_bins(depth: np.ndarray, d_min: float, d_max: float, bins: int = DEPTH_BINS) -> np.ndarray:
    """Index of the nearest bin centre (depths outside the range clamp to the end bins)."""
    idx = np.floor((np.nan_to_num(depth, nan=d_min) - d_min) / (d_max - d_min) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def train_depth_probe(features, global_tokens, depths, epochs: int = 50, lr: float = 100.0,
                      d_range: tuple[float, float] | None = None, momentum: float = 0.9,
                      normalize: bool = True, batch_size: int | None = None) -> DepthProbe:
    """Fit the 256-bin depth head (patch token + global token) with cross-entropy on the nearest bin.

    The sharp bin posteriors this head needs call for a much larger step
    size than the segmentation head.
    """
    fusion = _fusion_init(features)
    feats = _as_arrays(features)
    d_min, d_max = d_range or depth_range(depths)
    inputs = [DepthProbe.tokens(f, g) for f, g in zip(feats, global_tokens)]
    norm = fit_norm(inputs) if normalize else None
    inputs = [_normalize(x, norm) for x in inputs]
    if fusion is not None:
        # the fusion map is shared between patch and global tokens; lift it to the stacked input
        C_in, C = fusion.shape
        fusion = np.block([[fusion, np.zeros((C_in, C))], [np.zeros((C_in, C)), fusion]])
    targets = [depth_to_bins(d, d_min, d_max) for d in depths]
    valids = [valid_depth(d) for d in depths]
    params, history = _train_linear(inputs, targets, valids, DEPTH_BINS, epochs, lr, momentum, fusion, batch_size)
    weight = params["weight"]
    if fusion is not None:
        # fold the learned (block) fusion into the head so prediction only needs a plain linear map
        weight = params["fusion"] @ weight
    probe = DepthProbe(weight, params["bias"], d_min, d_max, norm)
    probe.history = history
    return probe


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(pred, gt, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = gt != ignore_index
    return np.bincount(gt[keep] * num_classes + pred[keep], minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def metrics_seg(pred, gt, num_classes: int | None = None, ignore_index: int = IGNORE_INDEX) -> dict:
    """mIoU, mAcc and aAcc (fractions) over one image or a list of images.

    Classes that never occur in the ground truth are left out of the means.
    """
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    for p, g in zip(preds, gts):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"prediction shape {np.shape(p)} does not match ground truth {np.shape(g)}")
    if num_classes is None:
        hi = [np.max(np.where(np.asarray(g) == ignore_index, -1, g)) for g in gts] + [np.max(p) for p in preds]
        num_classes = int(max(hi)) + 1
    conf = sum(confusion_matrix(p, g, num_classes, ignore_index) for p, g in zip(preds, gts))
    total = conf.sum()
    if total == 0:
        raise ValueError("no labelled pixels to evaluate")
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    present = gt_count > 0
    iou = tp[present] / (gt_count[present] + pred_count[present] - tp[present])
    acc = tp[present] / gt_count[present]
    return {"mIoU": float(iou.mean()), "mAcc": float(acc.mean()), "aAcc": float(tp.sum() / total)}


def metrics_depth(pred, gt, mask=None) -> dict:
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    masks = mask if isinstance(mask, (list, tuple)) else [mask] * len(gts)
    sq, rel, n = 0.0, 0.0, 0
    for p, g, m in zip(preds, gts, masks):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
        m = valid_depth(g) if m is None else (np.asarray(m, dtype=bool) & valid_depth(g))
        sq += float(np.sum((p[m] - g[m]) ** 2))
        rel += float(np.sum(np.abs(p[m] - g[m]) / g[m]))
        n += int(m.sum())
    if n == 0:
        raise ValueError("depth mask is empty")
    return {"RMSE": float(np.sqrt(sq / n)), "AbsRel": rel / n}


def quantization_floor(d_min: float, d_max: float, bins: int = DEPTH_BINS) -> float:
    """RMS error of rounding a uniform depth to the nearest bin centre."""
    return (d_max - d_min) / bins / np.sqrt(12.0)


# ---------------------------------------------------------------------------
# PCA


def pca_components(features: np.ndarray, k: int = 3, rel_tol: float = 1e-9):
    """Projections of every pixel onto the top-``k`` principal axes.

    Returns ``(projections (H, W, k), axes (k, C))``. Each axis is signed so
    its largest-magnitude loading is positive; axes whose variance is
    negligible relative to the first are returned as zeros.
    """
    H, W, C = features.shape
    if C < k:
        raise ValueError(f"need at least {k} channels for PCA, got {C}")
    X = features.reshape(-1, C).astype(np.float64)
    Xc = X - X.mean(axis=0)
    _, S, Vt = np.linalg.svd(Xc, full_matrices=False)
    axes = Vt[:k].copy()
    for i in range(axes.shape[0]):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    if S.size == 0 or S[0] == 0:
        return np.zeros((H, W, k)), np.zeros((k, C))
    dead = S[:k] <= rel_tol * S[0]
    axes[dead] = 0.0
    return (Xc @ axes.T).reshape(H, W, k), axes


def pca_visualize(features: np.ndarray) -> np.ndarray:
    """Top-3 principal components rescaled to [0, 1] per channel, as an RGB image."""
    proj, _ = pca_components(np.asarray(features, dtype=np.float64), 3)
    lo = proj.min(axis=(0, 1))
    span = proj.max(axis=(0, 1)) - lo
    out = np.zeros_like(proj)
    ok = span > 0
    out[..., ok] = (proj[..., ok] - lo[ok]) / span[ok]
    return out
