"""On-disk formats: feature maps (FMAP), scene checkpoints (GSPL), manifests, PNGs, extractor checkpoints.

Binary formats are little-endian. Camera extrinsics are 4x4 world-to-camera
matrices stored row-major, with +x right, +y down and +z forward in camera
space.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .scene import CameraView, FeatureDecoder, Scene, num_sh_coeffs

FMAP_MAGIC = b"FMAP"
GSPL_MAGIC = b"GSPL"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file contents."""


# ---------------------------------------------------------------------------
# feature maps


def encode_fmap(fmap: np.ndarray) -> bytes:
    fmap = np.asarray(fmap)
    if fmap.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {fmap.shape}")
    data = fmap.astype("<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("feature map contains non-finite values")
    H, W, C = data.shape
    return FMAP_MAGIC + struct.pack("<4I", FORMAT_VERSION, H, W, C) + data.tobytes(order="C")


def decode_fmap(buf: bytes) -> np.ndarray:
    if len(buf) < 20 or buf[:4] != FMAP_MAGIC:
        raise FormatError("not an FMAP file (bad magic)")
    version, H, W, C = struct.unpack_from("<4I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported FMAP version {version}")
    expected = 20 + 4 * H * W * C
    if len(buf) != expected:
        raise FormatError(f"FMAP length {len(buf)} does not match header ({expected} bytes expected)")
    data = np.frombuffer(buf, dtype="<f4", offset=20).reshape(H, W, C)
    if not np.all(np.isfinite(data)):
        raise FormatError("FMAP contains non-finite values")
    return data.astype(np.float32)


def save_fmap(path, fmap: np.ndarray) -> None:
    Path(path).write_bytes(encode_fmap(fmap))


def load_fmap(path) -> np.ndarray:
    return decode_fmap(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# scene checkpoints
#
# header: magic, version, M, D, sh_degree (u32 each)
# M records: mean[3] log_scale[3] quat[4] opacity_logit sh[3*K] feature[D] (f32)
# decoder: C_out (u32), kernel[C_out, D, 3, 3] and bias[C_out] (f32)


def encode_scene(scene: Scene) -> bytes:
    M, D, L = len(scene), scene.feature_dim, scene.sh_degree
    K = num_sh_coeffs(L)
    records = np.concatenate(
        [
            scene.means, scene.log_scales, scene.quats, scene.opacity_logits[:, None],
            scene.sh.reshape(M, 3 * K), scene.features,
        ],
        axis=1,
    ).astype("<f4")
    dec = scene.decoder
    if dec.in_channels != D:
        raise ValueError(f"decoder expects {dec.in_channels} channels but the scene has D={D}")
    return b"".join([
        GSPL_MAGIC,
        struct.pack("<4I", FORMAT_VERSION, M, D, L),
        records.tobytes(),
        struct.pack("<I", dec.out_channels),
        dec.kernel.astype("<f4").tobytes(),
        dec.bias.astype("<f4").tobytes(),
    ])


def decode_scene(buf: bytes) -> Scene:
    if len(buf) < 20 or buf[:4] != GSPL_MAGIC:
        raise FormatError("not a GSPL checkpoint (bad magic)")
    version, M, D, L = struct.unpack_from("<4I", buf, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported GSPL version {version}")
    if L > 3:
        raise FormatError(f"unsupported SH degree {L}")
    K = num_sh_coeffs(L)
    width = 11 + 3 * K + D
    off = 20
    need = off + 4 * M * width + 4
    if len(buf) < need:
        raise FormatError("GSPL checkpoint is truncated")
    rec = np.frombuffer(buf, dtype="<f4", count=M * width, offset=off).reshape(M, width).astype(np.float64)
    off += 4 * M * width
    (c_out,) = struct.unpack_from("<I", buf, off)
    off += 4
    n_kernel = c_out * D * 9
    if len(buf) != off + 4 * (n_kernel + c_out):
        raise FormatError("GSPL decoder block has the wrong length")
    kernel = np.frombuffer(buf, dtype="<f4", count=n_kernel, offset=off).reshape(c_out, D, 3, 3)
    bias = np.frombuffer(buf, dtype="<f4", count=c_out, offset=off + 4 * n_kernel)
    decoder = FeatureDecoder(kernel.astype(np.float64), bias.astype(np.float64))
    return Scene(
        rec[:, 0:3].copy(), rec[:, 3:6].copy(), rec[:, 6:10].copy(), rec[:, 10].copy(),
        rec[:, 11:11 + 3 * K].reshape(M, K, 3).copy(), rec[:, 11 + 3 * K:].copy(), decoder, L,
    )


def save_scene(path, scene: Scene) -> None:
    Path(path).write_bytes(encode_scene(scene))


def load_scene(path) -> Scene:
    return decode_scene(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# images


def load_png(path) -> np.ndarray:
    """8-bit image as float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_labels(path) -> np.ndarray:
    """Class-id PNG (single channel, 255 = ignore) or ``.npy`` array."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SceneManifest:
    scene_id: str
    feature_channels: int
    views: list  # CameraView with image_path / feature_path set
    root: Path

    def to_dict(self) -> dict:
        out = []
        for v in self.views:
            out.append({
                "image": str(v.image_path), "features": None if v.feature_path is None else str(v.feature_path),
                "width": v.width, "height": v.height, "fx": v.fx, "fy": v.fy, "cx": v.cx, "cy": v.cy,
                "world_to_camera": [float(x) for x in np.asarray(v.world_to_camera).ravel()],
            })
        return {"scene_id": self.scene_id, "feature_channels": self.feature_channels, "views": out}

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    def load_images(self) -> list:
        return [load_png(self.resolve(v.image_path)) for v in self.views]

    def load_feature_maps(self) -> list:
        maps = []
        for v in self.views:
            fm = load_fmap(self.resolve(v.feature_path)).astype(np.float64)
            if fm.shape[2] != self.feature_channels:
                raise FormatError(f"{v.feature_path}: {fm.shape[2]} channels, manifest says {self.feature_channels}")
            maps.append(fm)
        return maps


def read_manifest(path, check_files: bool = True) -> SceneManifest:
    """Parse a JSON scene manifest; relative paths are taken from the manifest's directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("scene_id", "feature_channels", "views"):
        if key not in doc:
            raise FormatError(f"{path}: missing field {key!r}")
    root = path.parent
    views = []
    for i, v in enumerate(doc["views"]):
        try:
            w2c = np.asarray(v["world_to_camera"], dtype=np.float64)
            if w2c.size != 16:
                raise FormatError(f"{path}: view {i} world_to_camera needs 16 values")
            cam = CameraView(int(v["width"]), int(v["height"]), float(v["fx"]), float(v["fy"]), float(v["cx"]),
                             float(v["cy"]), w2c.reshape(4, 4), v["image"], v.get("features"))
        except KeyError as exc:
            raise FormatError(f"{path}: view {i} lacks field {exc}") from exc
        if check_files:
            for p in (v["image"], v.get("features")):
                if p is None:
                    raise FormatError(f"{path}: view {i} has no feature map path")
                full = Path(p) if Path(p).is_absolute() else root / p
                if not full.exists():
                    raise FileNotFoundError(f"missing file referenced by manifest: {full}")
        views.append(cam)
    return SceneManifest(str(doc["scene_id"]), int(doc["feature_channels"]), views, root)


def write_manifest(path, manifest: SceneManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2))


def camera_from_dict(d: dict) -> CameraView:
    return CameraView(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]), float(d["cx"]),
                      float(d["cy"]), np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4))


# ---------------------------------------------------------------------------
# extractor checkpoints (npz weights plus a JSON sidecar in the same archive)


def save_extractor(path, extractor) -> None:
    meta = {"kind": extractor.kind, "patch_size": extractor.patch_size, "out_dim": extractor.out_dim}
    arrays = {f"param/{k}": v for k, v in extractor.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_extractor(path):
    from .extractor import ToyPatchEncoder

    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        params = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("param/")}
    if meta.get("kind") != ToyPatchEncoder.kind:
        raise FormatError(f"unsupported extractor kind {meta.get('kind')!r}")
    return ToyPatchEncoder(params, meta["patch_size"])
