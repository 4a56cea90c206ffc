import numpy as np
import pytest
from scipy.signal import convolve2d

from featsplat.losses import gaussian_window, l1_loss, loss_feat, loss_rgb, psnr, ssim
from featsplat.optim import Adam, AdamW, exponential_lr


def _imgs(seed=0, shape=(12, 14, 3)):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.1, 0.9, size=shape), rng.uniform(0.1, 0.9, size=shape)


def _ssim_oracle(x, y):
    """SSIM from an explicit 2D window and full zero-padded convolution per channel."""
    g = gaussian_window()
    w2 = np.outer(g, g)
    vals = []
    for c in range(x.shape[2]):
        f = lambda a: convolve2d(a, w2[::-1, ::-1], mode="same", boundary="fill")  # noqa: E731
        a, b = x[..., c], y[..., c]
        mx, my = f(a), f(b)
        sxx, syy, sxy = f(a * a) - mx ** 2, f(b * b) - my ** 2, f(a * b) - mx * my
        C1, C2 = 0.01 ** 2, 0.03 ** 2
        vals.append(((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx ** 2 + my ** 2 + C1) * (sxx + syy + C2)))
    return float(np.mean(np.stack(vals, -1)))


def test_ssim_matches_direct_window_oracle():
    x, y = _imgs(1)
    assert ssim(x, y) == pytest.approx(_ssim_oracle(x, y), abs=1e-12)
    assert ssim(x, x) == pytest.approx(1.0)


def test_rgb_loss_identity_and_offset():
    x, _ = _imgs(2)
    loss, grad = loss_rgb(x, x)
    assert loss == pytest.approx(0.0, abs=1e-12)
    l1, _ = l1_loss(x + 0.1, x)
    assert l1 == pytest.approx(0.1)
    lam = 0.2
    total, _ = loss_rgb(x + 0.1, x, lam)
    s = ssim(x + 0.1, x)
    assert total - lam * (1 - s) / 2 == pytest.approx(0.1 * (1 - lam))


def test_rgb_loss_lambda_zero_is_l1():
    x, y = _imgs(3)
    assert loss_rgb(x, y, 0.0)[0] == l1_loss(x, y)[0]


def test_rgb_loss_gradient_finite_differences():
    x, y = _imgs(4, (9, 10, 2))
    _, g = loss_rgb(x, y, 0.2)
    rng = np.random.default_rng(0)
    eps = 1e-6
    for _ in range(25):
        idx = tuple(rng.integers(s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (loss_rgb(xp, y, 0.2)[0] - loss_rgb(xm, y, 0.2)[0]) / (2 * eps)
        assert fd == pytest.approx(g[idx], rel=1e-4, abs=1e-9)


def test_feature_loss():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(4, 5, 6))
    assert loss_feat(f, f)[0] == 0.0
    assert loss_feat(f, f + 0.37)[0] == pytest.approx(0.37)
    g = rng.normal(size=f.shape)
    direct = sum(abs(a - b) for a, b in zip(f.ravel(), g.ravel())) / f.size
    assert loss_feat(f, g)[0] == pytest.approx(direct, abs=1e-7)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_rgb(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        loss_feat(np.zeros((4, 4, 3)), np.zeros((4, 4, 2)))


def test_psnr():
    x = np.full((4, 4, 3), 0.5)
    assert psnr(x, x + 0.1) == pytest.approx(20.0)
    assert psnr(x, x) == float("inf")


def _adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_scalar_recurrence():
    grads = [0.3, -1.2, 0.5, 2.0]
    p = {"x": np.array([1.0])}
    opt = Adam({"x": 0.01})
    for g in grads:
        opt.step(p, {"x": np.array([g])})
    assert p["x"][0] == pytest.approx(_adam_reference(1.0, grads, 0.01), abs=1e-15)


def test_adamw_decoupled_decay():
    p = {"x": np.array([2.0])}
    opt = AdamW({"x": 0.1}, weight_decay=0.5)
    opt.step(p, {"x": np.array([0.0])})
    assert p["x"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adam_ignores_groups_without_lr_and_remaps():
    p = {"a": np.ones((3, 2)), "b": np.ones(3)}
    opt = Adam({"a": 0.1})
    opt.step(p, {"a": np.ones((3, 2)), "b": np.ones(3)})
    assert np.array_equal(p["b"], np.ones(3))
    m_before = opt.m["a"].copy()
    opt.remap("a", np.array([2, -1, 0]))
    assert np.array_equal(opt.m["a"][0], m_before[2])
    assert not opt.m["a"][1].any()


def test_exponential_lr_endpoints():
    assert exponential_lr(0, 100, 1.6e-4, 1.6e-6) == pytest.approx(1.6e-4)
    assert exponential_lr(99, 100, 1.6e-4, 1.6e-6) == pytest.approx(1.6e-6)
    assert exponential_lr(49.5, 100, 1.6e-4, 1.6e-6) == pytest.approx(1.6e-5)
