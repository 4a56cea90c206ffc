"""Gaussian scene containers, cameras, and the geometric building blocks.

Parameters are stored unconstrained (log-scale, raw quaternion, opacity
logit) and activated on use. Everything array-shaped is float64.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

NEAR_PLANE = 0.01
COV2D_DILATION = 0.3
DEFAULT_FEATURE_DIMS = (32, 64, 128)


class ConfigurationError(ValueError):
    """Raised when shapes or settings are inconsistent with each other."""


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


# ---------------------------------------------------------------------------
# rotations


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions ``(w, x, y, z)``.

    Accepts ``(4,)`` or ``(N, 4)``; the caller is responsible for normalising.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """dR[i, j] / dq[k] for unit quaternions, shape ``(N, 3, 3, 4)``."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    w, x, y, z = q.T
    zero = np.zeros_like(w)
    # rows of R flattened, each differentiated w.r.t. (w, x, y, z)
    d = np.stack(
        [
            np.stack([zero, zero, -4 * y, -4 * z], -1),
            np.stack([-2 * z, 2 * y, 2 * x, -2 * w], -1),
            np.stack([2 * y, 2 * z, 2 * w, 2 * x], -1),
            np.stack([2 * z, 2 * y, 2 * x, 2 * w], -1),
            np.stack([zero, -4 * x, zero, -4 * z], -1),
            np.stack([-2 * x, -2 * w, 2 * z, 2 * y], -1),
            np.stack([-2 * y, 2 * z, -2 * w, 2 * x], -1),
            np.stack([2 * x, 2 * w, 2 * z, 2 * y], -1),
            np.stack([zero, -4 * x, -4 * y, zero], -1),
        ],
        axis=1,
    )
    return d.reshape(-1, 3, 3, 4)


def axis_angle_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def covariance_3d(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """World-space covariance ``R S S^T R^T`` with ``S = diag(scale)``.

    ``scale`` is the activated (positive) scale, ``rotation`` a quaternion
    (normalised here). Both may carry a leading batch axis.
    """
    scale = np.asarray(scale, dtype=np.float64)
    q = np.asarray(rotation, dtype=np.float64)
    R = quat_to_rotmat(q / np.linalg.norm(q, axis=-1, keepdims=True))
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Gaussian3D:
    """A single splat, mostly useful for building small scenes by hand."""

    mean: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray  # ((L+1)^2, 3)
    feature: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class FeatureDecoder:
    """Scene-specific 3x3 convolution lifting rendered low-dim features.

    ``kernel`` has shape ``(C_out, C_in, 3, 3)``; ``bias`` shape ``(C_out,)``.
    """

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise ConfigurationError(f"decoder kernel must be (C_out, C_in, 3, 3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ConfigurationError("decoder bias length must equal C_out")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @classmethod
    def init(cls, in_channels: int, out_channels: int, rng: np.random.Generator) -> "FeatureDecoder":
        bound = 1.0 / np.sqrt(9 * in_channels)
        kernel = rng.uniform(-bound, bound, size=(out_channels, in_channels, 3, 3))
        return cls(kernel, np.zeros(out_channels))

    @classmethod
    def identity(cls, channels: int) -> "FeatureDecoder":
        kernel = np.zeros((channels, channels, 3, 3))
        kernel[:, :, 1, 1] = np.eye(channels)
        return cls(kernel, np.zeros(channels))

    def copy(self) -> "FeatureDecoder":
        return FeatureDecoder(self.kernel.copy(), self.bias.copy())


@dataclass
class Scene:
    """Structure-of-arrays store for ``M`` feature Gaussians plus their decoder."""

    means: np.ndarray  # (M, 3)
    log_scales: np.ndarray  # (M, 3)
    quats: np.ndarray  # (M, 4), (w, x, y, z), not necessarily unit
    opacity_logits: np.ndarray  # (M,)
    sh: np.ndarray  # (M, (L+1)^2, 3)
    features: np.ndarray  # (M, D)
    decoder: FeatureDecoder
    sh_degree: int = 3

    PARAM_NAMES = ("means", "log_scales", "quats", "opacity_logits", "sh", "features")
    GEOMETRY_PARAMS = ("means", "log_scales", "quats", "opacity_logits", "sh")

    def __post_init__(self):
        for name in self.PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        M = self.means.shape[0]
        expected = {
            "means": (M, 3),
            "log_scales": (M, 3),
            "quats": (M, 4),
            "opacity_logits": (M,),
            "sh": (M, num_sh_coeffs(self.sh_degree), 3),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.features.ndim != 2 or self.features.shape[0] != M:
            raise ConfigurationError("features must be (M, D)")
        if self.decoder.in_channels != self.feature_dim:
            raise ConfigurationError(
                f"decoder expects {self.decoder.in_channels} input channels but scene features have {self.feature_dim}"
            )

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def unit_quats(self) -> np.ndarray:
        return self.quats / np.linalg.norm(self.quats, axis=-1, keepdims=True)

    def covariances(self) -> np.ndarray:
        return covariance_3d(self.scales, self.unit_quats)

    def normalize_rotations(self) -> None:
        self.quats = self.unit_quats

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
            float(self.opacity_logits[i]), self.sh[i].copy(), self.features[i].copy(),
        )

    @classmethod
    def from_gaussians(cls, gaussians, decoder: FeatureDecoder, sh_degree: int) -> "Scene":
        gaussians = list(gaussians)
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            quats=np.stack([g.rotation for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=np.stack([g.sh_coeffs for g in gaussians]),
            features=np.stack([g.feature for g in gaussians]),
            decoder=decoder,
            sh_degree=sh_degree,
        )

    def append(self, g: Gaussian3D) -> None:
        if g.feature.shape != (self.feature_dim,):
            raise ConfigurationError("feature length must equal the scene feature dimension")
        self.means = np.vstack([self.means, g.mean])
        self.log_scales = np.vstack([self.log_scales, g.log_scale])
        self.quats = np.vstack([self.quats, g.rotation])
        self.opacity_logits = np.append(self.opacity_logits, g.opacity_logit)
        self.sh = np.concatenate([self.sh, g.sh_coeffs[None]])
        self.features = np.vstack([self.features, g.feature])

    def select(self, index) -> "Scene":
        """New scene holding the splats picked by ``index`` (mask or int array)."""
        return Scene(
            self.means[index], self.log_scales[index], self.quats[index],
            self.opacity_logits[index], self.sh[index], self.features[index],
            self.decoder, self.sh_degree,
        )

    def copy(self) -> "Scene":
        return Scene(
            self.means.copy(), self.log_scales.copy(), self.quats.copy(),
            self.opacity_logits.copy(), self.sh.copy(), self.features.copy(),
            self.decoder.copy(), self.sh_degree,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def fingerprint(self) -> str:
        """Digest of every parameter; used to detect stale render caches."""
        h = hashlib.blake2b(digest_size=16)
        for name in self.PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        h.update(self.decoder.kernel.tobytes())
        h.update(self.decoder.bias.tobytes())
        return h.hexdigest()

    @classmethod
    def random(
        cls,
        num: int,
        feature_dim: int,
        rng: np.random.Generator,
        *,
        bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
        sh_degree: int = 3,
        decoder_out: int | None = None,
        scale_range=(0.05, 0.2),
    ) -> "Scene":
        """Random initialisation inside an axis-aligned box."""
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
        means = rng.uniform(lo, hi, size=(num, 3))
        log_scales = np.log(rng.uniform(*scale_range, size=(num, 3)))
        quats = rng.normal(size=(num, 4))
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
        opacity_logits = logit(np.full(num, 0.1))
        sh = np.zeros((num, num_sh_coeffs(sh_degree), 3))
        sh[:, 0, :] = rng.uniform(-1.0, 1.0, size=(num, 3))
        features = rng.uniform(0.0, 1.0, size=(num, feature_dim))
        decoder = FeatureDecoder.init(feature_dim, decoder_out or feature_dim, rng)
        return cls(means, log_scales, quats, opacity_logits, sh, features, decoder, sh_degree)


@dataclass
class CameraView:
    """Pinhole camera with a row-major world-to-camera transform.

    Camera space looks down +z with +y pointing down the image. Pixel
    ``(u, v)`` has its centre at ``(u + 0.5, v + 0.5)``.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    image_path: str | None = None
    feature_path: str | None = None

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ConfigurationError("image size must be positive")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ConfigurationError("world_to_camera rotation block is not a proper rotation")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, width: int, height: int) -> "CameraView":
        """Same pose with intrinsics rescaled to another resolution."""
        sx, sy = width / self.width, height / self.height
        return replace(
            self, width=int(width), height=int(height),
            fx=self.fx * sx, fy=self.fy * sy, cx=self.cx * sx, cy=self.cy * sy,
        )

    def project_points(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera depth for world points ``(N, 3)``."""
        p = np.atleast_2d(points) @ self.rotation.T + self.translation
        z = p[:, 2]
        uv = np.stack([self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy], axis=-1)
        return uv, z

    @classmethod
    def look_at(cls, eye, target, width: int, height: int, fov_deg: float = 60.0, up=(0.0, -1.0, 0.0)) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        # image +y is "down", so the camera's down axis is opposite the world up hint
        right = np.cross(-np.asarray(up, dtype=np.float64), forward)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ eye
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, w2c)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int


# ---------------------------------------------------------------------------
# projection


def projection_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of the pinhole map at camera-space points ``t`` (N, 3) -> (N, 2, 3)."""
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    J = np.zeros((t.shape[0], 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    return J


def project_gaussian(g: Gaussian3D, cam: CameraView) -> Splat2D | None:
    """Project one Gaussian; ``None`` means it was culled."""
    from .raster import project_scene

    decoder = FeatureDecoder.identity(g.feature.shape[0])
    scene = Scene.from_gaussians([g], decoder, sh_degree=int(round(np.sqrt(g.sh_coeffs.shape[0]))) - 1)
    proj = project_scene(scene, cam)
    if not proj.visible[0]:
        return None
    return Splat2D(proj.mean2d[0].copy(), proj.cov2d[0].copy(), float(proj.depth[0]), 0)


# ---------------------------------------------------------------------------
# decoder


def _conv3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    H, W, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.zeros((H, W, kernel.shape[0]))
    for dy in range(3):
        for dx in range(3):
            out += xp[dy:dy + H, dx:dx + W] @ kernel[:, :, dy, dx].T
    return out


def decoder_apply(decoder: FeatureDecoder, f_low: np.ndarray) -> np.ndarray:
    """Zero-padded, stride-1 3x3 convolution of an ``(H, W, D)`` feature image."""
    f_low = np.asarray(f_low, dtype=np.float64)
    if f_low.ndim != 3 or f_low.shape[2] != decoder.in_channels:
        raise ConfigurationError(
            f"decoder expects {decoder.in_channels} channels, feature image has shape {f_low.shape}"
        )
    return _conv3x3(f_low, decoder.kernel) + decoder.bias


def decoder_backward(decoder: FeatureDecoder, f_low: np.ndarray, grad_out: np.ndarray):
    """Gradients ``(d_input, d_kernel, d_bias)`` of ``decoder_apply``."""
    H, W, _ = f_low.shape
    xp = np.pad(f_low, ((1, 1), (1, 1), (0, 0)))
    gp = np.pad(grad_out, ((1, 1), (1, 1), (0, 0)))
    d_kernel = np.empty_like(decoder.kernel)
    d_input = np.zeros_like(f_low)
    for dy in range(3):
        for dx in range(3):
            patch = xp[dy:dy + H, dx:dx + W]
            d_kernel[:, :, dy, dx] = np.einsum("hwo,hwi->oi", grad_out, patch)
            # out[y, x] reads in[y + dy - 1, x + dx - 1]
            d_input += gp[2 - dy:2 - dy + H, 2 - dx:2 - dx + W] @ decoder.kernel[:, :, dy, dx]
    d_bias = grad_out.sum(axis=(0, 1))
    return d_input, d_kernel, d_bias
