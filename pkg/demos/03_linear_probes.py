"""Linear probes and feature assembly on a controlled task.

Segmentation: one feature channel carries the region label, the other
seven are noise. We compare a probe on these features alone with probes on
the features concatenated with pure noise and with themselves. Extra noise
channels should not hurt, and duplicating the features cannot add
information.

Depth: features linear in depth, a 256-bin classification head, and the
error compared with the rounding error of the bins themselves.

Run:  python3 demos/03_linear_probes.py   (about half a minute)
"""

import numpy as np
from scipy.ndimage import gaussian_filter

from featsplat import assemble, metrics_depth, metrics_seg, predict_depth, train_depth_probe, train_seg_probe
from featsplat.probe import quantization_floor

rng = np.random.default_rng(0)


def regions(n):
    feats, labels = [], []
    for _ in range(n):
        lab = (gaussian_filter(rng.normal(size=(16, 16)), 3, mode="wrap") > 0).astype(int)
        f = 0.1 * rng.normal(size=(16, 16, 8))
        f[..., 0] += 2 * lab - 1
        feats.append(f)
        labels.append(np.kron(lab, np.ones((4, 4), dtype=int)))  # labels at 4x the feature grid
    return feats, labels


train_f, train_l = regions(8)
test_f, test_l = regions(4)
noise = lambda fs: [rng.normal(size=f.shape) for f in fs]  # noqa: E731
variants = {
    "features only": (train_f, test_f),
    "concat with noise": ([assemble(f, n) for f, n in zip(train_f, noise(train_f))],
                          [assemble(f, n) for f, n in zip(test_f, noise(test_f))]),
    "concat with itself": ([assemble(f, None, "concat-self") for f in train_f],
                           [assemble(f, None, "concat-self") for f in test_f]),
}
for name, (tr, te) in variants.items():
    probe = train_seg_probe(tr, train_l, epochs=100)
    m = metrics_seg([probe.predict(f, 64, 64) for f in te], test_l)
    print(f"{name:20s} mIoU {100 * m['mIoU']:.2f}  aAcc {100 * m['aAcc']:.2f}")

feats, globs, depths = [], [], []
for _ in range(8):
    d = rng.uniform(1.0, 5.0, size=(16, 16))
    feats.append(np.stack([d, np.ones_like(d)], -1))
    globs.append(np.zeros(2))
    depths.append(d)
probe = train_depth_probe(feats, globs, depths, epochs=2000, lr=3000.0, d_range=(1.0, 5.0))
m = metrics_depth([predict_depth(probe, f, g) for f, g in zip(feats, globs)], depths)
print(f"depth RMSE {m['RMSE']:.5f}  AbsRel {m['AbsRel']:.5f}  bin rounding floor {quantization_floor(1.0, 5.0):.5f}")
