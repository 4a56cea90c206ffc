"""Real spherical harmonics up to degree 3 for view-dependent colour.

Basis functions use the usual splatting sign convention and ordering
(band by band, m = -l..l). Each one is stored as a short list of
monomials so values and direction gradients come from the same table.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
    -0.4570457994644658, 1.445305721320277, -0.5900435899266435,
)
COLOR_OFFSET = 0.5
MAX_DEGREE = 3

# (coefficient, power of x, power of y, power of z)
_BASIS = [
    [(SH_C0, 0, 0, 0)],
    [(-SH_C1, 0, 1, 0)],
    [(SH_C1, 0, 0, 1)],
    [(-SH_C1, 1, 0, 0)],
    [(SH_C2[0], 1, 1, 0)],
    [(SH_C2[1], 0, 1, 1)],
    [(2 * SH_C2[2], 0, 0, 2), (-SH_C2[2], 2, 0, 0), (-SH_C2[2], 0, 2, 0)],
    [(SH_C2[3], 1, 0, 1)],
    [(SH_C2[4], 2, 0, 0), (-SH_C2[4], 0, 2, 0)],
    [(3 * SH_C3[0], 2, 1, 0), (-SH_C3[0], 0, 3, 0)],
    [(SH_C3[1], 1, 1, 1)],
    [(4 * SH_C3[2], 0, 1, 2), (-SH_C3[2], 2, 1, 0), (-SH_C3[2], 0, 3, 0)],
    [(2 * SH_C3[3], 0, 0, 3), (-3 * SH_C3[3], 2, 0, 1), (-3 * SH_C3[3], 0, 2, 1)],
    [(4 * SH_C3[4], 1, 0, 2), (-SH_C3[4], 3, 0, 0), (-SH_C3[4], 1, 2, 0)],
    [(SH_C3[5], 2, 0, 1), (-SH_C3[5], 0, 2, 1)],
    [(SH_C3[6], 3, 0, 0), (-3 * SH_C3[6], 1, 2, 0)],
]


def _pow(v, n):
    return np.ones_like(v) if n == 0 else v ** n


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values for unit directions ``(N, 3)`` -> ``(N, (degree+1)^2)``."""
    return sh_basis_and_grad(dirs, degree)[0]


def sh_basis_and_grad(dirs: np.ndarray, degree: int):
    """Basis values and their gradients w.r.t. the direction components.

    The gradient is the ambient one (the polynomial differentiated in R^3);
    callers chain it through the normalisation of the direction.
    """
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in 0..{MAX_DEGREE}, got {degree}")
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    K = (degree + 1) ** 2
    vals = np.zeros((dirs.shape[0], K))
    grads = np.zeros((dirs.shape[0], K, 3))
    for k in range(K):
        for c, px, py, pz in _BASIS[k]:
            vals[:, k] += c * _pow(x, px) * _pow(y, py) * _pow(z, pz)
            if px:
                grads[:, k, 0] += c * px * _pow(x, px - 1) * _pow(y, py) * _pow(z, pz)
            if py:
                grads[:, k, 1] += c * py * _pow(x, px) * _pow(y, py - 1) * _pow(z, pz)
            if pz:
                grads[:, k, 2] += c * pz * _pow(x, px) * _pow(y, py) * _pow(z, pz - 1)
    return vals, grads


def eval_sh(sh_coeffs: np.ndarray, view_direction: np.ndarray) -> np.ndarray:
    """RGB from SH coefficients ``((L+1)^2, 3)`` or ``(N, (L+1)^2, 3)``.

    Adds the 0.5 offset and clamps at zero.
    """
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    single = sh_coeffs.ndim == 2
    coeffs = sh_coeffs[None] if single else sh_coeffs
    degree = int(round(np.sqrt(coeffs.shape[1]))) - 1
    basis = sh_basis(np.reshape(view_direction, (-1, 3)), degree)
    rgb = np.maximum(np.einsum("nk,nkc->nc", basis, coeffs) + COLOR_OFFSET, 0.0)
    return rgb[0] if single else rgb
