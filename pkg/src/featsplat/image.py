"""Small image utilities: bilinear resize/sample, flips, PNG helpers."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` linear-interpolation matrix with half-pixel centres.

    Sample positions outside the input range are clamped to the border.
    """
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    A = np.zeros((n_out, n_in))
    A[np.arange(n_out), lo] += 1.0 - frac
    A[np.arange(n_out), hi] += frac
    return A


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an ``(H, W, C)`` array (or ``(H, W)``) with bilinear weights."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        out = img.astype(np.float64, copy=True)
    else:
        Ay, Ax = bilinear_matrix(H, out_h), bilinear_matrix(W, out_w)
        out = np.einsum("oh,hwc,pw->opc", Ay, img, Ax)
    return out[..., 0] if squeeze else out


def sample_grid(grid: np.ndarray, pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Bilinearly sample a patch-grid map at image pixel positions ``(N, 2)`` (x, y)."""
    gx = pixels[:, 0] / patch_size - 0.5
    gy = pixels[:, 1] / patch_size - 0.5
    coords = np.stack([gy, gx])
    return np.stack(
        [map_coordinates(grid[..., c], coords, order=1, mode="nearest") for c in range(grid.shape[2])],
        axis=-1,
    )


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def center_crop_to_multiple(img: np.ndarray, multiple: int) -> np.ndarray:
    H, W = img.shape[:2]
    h, w = H - H % multiple, W - W % multiple
    y0, x0 = (H - h) // 2, (W - w) // 2
    return img[y0:y0 + h, x0:x0 + w]
