"""Image losses with analytic gradients: L1, SSIM and their blend."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    # zero-padded separable filter over the two spatial axes of (H, W, C)
    out = correlate1d(img, window, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, window, axis=1, mode="constant", cval=0.0)


def ssim(x: np.ndarray, y: np.ndarray, return_grad: bool = False):
    """Mean SSIM of two ``(H, W, C)`` images in [0, 1], optionally with d/dx."""
    _check_shapes(x, y)
    win = gaussian_window()
    mu_x, mu_y = _blur(x, win), _blur(y, win)
    sxx = _blur(x * x, win) - mu_x ** 2
    syy = _blur(y * y, win) - mu_y ** 2
    sxy = _blur(x * y, win) - mu_x * mu_y

    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    smap = (a1 * a2) / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value

    n = smap.size
    # partials of the map w.r.t. the local statistics, scaled for the mean
    d_mu_x = (2 * mu_y * a2 / (b1 * b2) - smap * 2 * mu_x / b1) / n
    d_sxx = -smap / b2 / n
    d_sxy = 2 * a1 / (b1 * b2) / n
    # sxx and sxy depend on mu_x as well
    d_mu_x = d_mu_x - 2 * mu_x * d_sxx - mu_y * d_sxy
    grad = _blur(d_mu_x, win) + 2 * x * _blur(d_sxx, win) + y * _blur(d_sxy, win)
    return value, grad


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its (sub)gradient w.r.t. ``pred``."""
    _check_shapes(pred, target)
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_rgb(render: np.ndarray, gt: np.ndarray, lambda_dssim: float = 0.2):
    """``(1 - lambda) * L1 + lambda * (1 - SSIM) / 2`` and its gradient."""
    l1, g_l1 = l1_loss(render, gt)
    if lambda_dssim == 0:
        return l1, g_l1
    s, g_s = ssim(render, gt, return_grad=True)
    loss = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s) / 2
    return loss, (1 - lambda_dssim) * g_l1 - 0.5 * lambda_dssim * g_s


def loss_feat(f_high: np.ndarray, gt_feat: np.ndarray):
    return l1_loss(f_high, gt_feat)


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    mse = float(np.mean((img - ref) ** 2))
    return float("inf") if mse == 0 else -10.0 * np.log10(mse)
