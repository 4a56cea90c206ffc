"""Adam / AdamW over named numpy parameter groups."""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam with one learning rate per named group.

    ``weight_decay`` > 0 turns this into decoupled AdamW. Parameters are
    updated in place.
    """

    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if name not in self.lrs:
                continue
            p = params[name]
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t.setdefault(name, 0)
            self.t[name] += 1
            t = self.t[name]
            lr = self.lrs[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            if self.weight_decay:
                p *= 1 - lr * self.weight_decay
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, name: str, index: np.ndarray) -> None:
        """Reindex moments after splats are added or removed.

        ``index`` gives, for each new row, the old row it came from or -1
        for a fresh row (whose moments start at zero).
        """
        if name not in self.m:
            return
        for buf in (self.m, self.v):
            old = buf[name]
            new = np.zeros((index.shape[0],) + old.shape[1:])
            src = index >= 0
            new[src] = old[index[src]]
            buf[name] = new


class AdamW(Adam):
    def __init__(self, lrs: dict[str, float], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-4):
        super().__init__(lrs, betas, eps, weight_decay)


def exponential_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Log-linear interpolation from ``lr_init`` to ``lr_final``."""
    if total <= 1:
        return lr_init
    t = min(max(step / (total - 1), 0.0), 1.0)
    return float(np.exp((1 - t) * np.log(lr_init) + t * np.log(lr_final)))
