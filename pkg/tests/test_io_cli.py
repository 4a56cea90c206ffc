import json
import struct

import numpy as np
import pytest

from featsplat import io as fio
from featsplat.cli import main
from featsplat.scene import num_sh_coeffs

from conftest import make_scene


def test_fmap_roundtrip_bytes():
    fmap = np.random.default_rng(0).normal(size=(3, 5, 7)).astype(np.float32)
    buf = fio.encode_fmap(fmap)
    assert buf[:4] == b"FMAP" and struct.unpack_from("<4I", buf, 4) == (1, 3, 5, 7)
    assert len(buf) == 20 + 4 * 3 * 5 * 7
    assert np.array_equal(fio.decode_fmap(buf), fmap)
    assert fio.encode_fmap(fio.decode_fmap(buf)) == buf


@pytest.mark.parametrize("mangle", [
    lambda b: b"XMAP" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-4],
    lambda b: b[:20] + struct.pack("<f", np.nan) + b[24:],
])
def test_fmap_rejects_bad_files(mangle):
    buf = fio.encode_fmap(np.ones((2, 2, 2)))
    with pytest.raises(fio.FormatError):
        fio.decode_fmap(mangle(buf))


def test_scene_roundtrip_bytes():
    scene = make_scene(7, feature_dim=5, seed=3, sh_degree=2)
    buf = fio.encode_scene(scene)
    M, D, K = 7, 5, num_sh_coeffs(2)
    assert struct.unpack_from("<4I", buf, 4) == (1, M, D, 2)
    c_out = scene.decoder.out_channels
    assert len(buf) == 20 + 4 * M * (11 + 3 * K + D) + 4 + 4 * (c_out * D * 9 + c_out)
    back = fio.decode_scene(buf)
    assert fio.encode_scene(back) == buf
    assert np.allclose(back.means, scene.means, atol=1e-6)
    assert np.allclose(back.sh, scene.sh, atol=1e-6)
    with pytest.raises(fio.FormatError):
        fio.decode_scene(b"GSPX" + buf[4:])
    with pytest.raises(fio.FormatError):
        fio.decode_scene(buf[:-1])
    with pytest.raises(fio.FormatError):
        fio.decode_scene(buf[:4] + struct.pack("<I", 2) + buf[8:])


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, size=(4, 6, 3)) / 255.0
    fio.save_png(tmp_path / "a.png", img)
    assert np.array_equal(fio.load_png(tmp_path / "a.png"), img)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--num-gaussians", "8", "--feature-dim", "4", "--map-channels", "6",
                 "--views", "3", "--size", "16", "--seed", "4"]) == 0
    return out


def _fit(synth_dir, out, *extra):
    return main(["fit", str(synth_dir / "manifest.json"), "--out", str(out), "--iterations", "6",
                 "--num-gaussians", "12", "--sh-degree", "1", "--log-every", "2", "--seed", "5", *extra])


@pytest.fixture(scope="module")
def checkpoint(synth_dir):
    out = synth_dir / "fit.gspl"
    assert _fit(synth_dir, out) == 0
    return out


def test_synth_outputs(synth_dir):
    m = fio.read_manifest(synth_dir / "manifest.json")
    assert len(m.views) == 3 and m.feature_channels == 6
    assert m.load_feature_maps()[0].shape == (4, 4, 6)
    assert fio.load_scene(synth_dir / "ground_truth.gspl").feature_dim == 4
    assert json.loads((synth_dir / "synth.run.json").read_text())["seed"] == 4


def test_fit_default_feature_dim_and_record(checkpoint):
    with open(checkpoint, "rb") as fh:
        _, M, D, L = struct.unpack("<4I", fh.read(20)[4:])
    assert D == 64 and L == 1
    rec = json.loads(checkpoint.with_name("fit.gspl.run.json").read_text())
    assert rec["command"] == "fit" and rec["seed"] == 5 and rec["version"].startswith("0.1.0")
    assert rec["config"]["feature_dim"] == 64
    lines = checkpoint.with_suffix(".metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["iteration"] for l in lines][-1] == 6


def test_fit_is_byte_deterministic(synth_dir, checkpoint, tmp_path):
    out = tmp_path / "again.gspl"
    assert _fit(synth_dir, out) == 0
    assert out.read_bytes() == checkpoint.read_bytes()


def test_fit_rejects_bad_inputs(synth_dir, tmp_path, capsys):
    m = json.loads((synth_dir / "manifest.json").read_text())
    m["views"][1]["features"] = "nowhere.fmap"
    bad = synth_dir / "bad.json"
    bad.write_text(json.dumps(m))
    assert main(["fit", str(bad), "--out", str(tmp_path / "x.gspl"), "--iterations", "1"]) == 2
    assert "nowhere.fmap" in capsys.readouterr().err
    assert _fit(synth_dir, tmp_path / "y.gspl", "--feature-dim", "24") == 2
    assert _fit(synth_dir, tmp_path / "z.gspl", "--rgb-weight", "0", "--feature-weight", "0") == 2


@pytest.mark.parametrize("mode,channels", [("rgb", 3), ("feature", 64), ("feature-high", 6), ("pca", 3)])
def test_render_modes(synth_dir, checkpoint, tmp_path, mode, channels):
    ext = ".png" if channels == 3 else ".fmap"
    out = tmp_path / f"r{ext}"
    assert main(["render", str(checkpoint), "--out", str(out), "--mode", mode, "--manifest",
                 str(synth_dir / "manifest.json"), "--view", "1", "--feature-width", "4", "--feature-height",
                 "4"]) == 0
    if ext == ".png":
        assert fio.load_png(out).shape == (16, 16, 3) if mode == "rgb" else (4, 4, 3)
    else:
        assert fio.load_fmap(out).shape == (4, 4, channels)


def _library(synth_dir, checkpoint):
    doc = json.loads((synth_dir / "manifest.json").read_text())
    doc["checkpoint"] = checkpoint.name
    lib = synth_dir / "library.json"
    lib.write_text(json.dumps(doc))
    return lib


def test_finetune_defaults_and_epochs(synth_dir, checkpoint, tmp_path):
    # the fitted decoder emits 6 channels, so the encoder must too
    lib = _library(synth_dir, checkpoint)
    out = tmp_path / "enc.npz"
    assert main(["finetune", str(lib), "--out", str(out), "--out-dim", "6", "--patch-size", "4"]) == 0
    rec = json.loads(out.with_name("enc.npz.run.json").read_text())
    cfg = rec["config"]
    assert (cfg["lr"], cfg["weight_decay"], cfg["batch_size"], cfg["epochs"]) == (1e-5, 1e-4, 2, 1)
    assert rec["metrics"]["steps"] == 2
    out3 = tmp_path / "enc3.npz"
    assert main(["finetune", str(lib), "--out", str(out3), "--out-dim", "6", "--patch-size", "4",
                 "--epochs", "3"]) == 0
    assert json.loads(out3.with_name("enc3.npz.run.json").read_text())["metrics"]["steps"] == 6
    assert fio.load_extractor(out3).out_dim == 6


def test_finetune_rejects_empty_library_and_mismatch(synth_dir, checkpoint, tmp_path):
    assert main(["finetune", "--out", str(tmp_path / "e.npz")]) == 2
    lib = _library(synth_dir, checkpoint)
    assert main(["finetune", str(lib), "--out", str(tmp_path / "e.npz"), "--out-dim", "5"]) == 2


def _probe_data(tmp_path, n, seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(3, 4)) * 3
    entries = []
    for i in range(n):
        lab = rng.integers(0, 3, size=(6, 6))
        np.save(tmp_path / f"f{seed}_{i}.npy", centers[lab] + 0.1 * rng.normal(size=(6, 6, 4)))
        np.save(tmp_path / f"l{seed}_{i}.npy", lab)
        entries.append({"features": f"f{seed}_{i}.npy", "labels": f"l{seed}_{i}.npy"})
    path = tmp_path / f"data{seed}.json"
    path.write_text(json.dumps({"entries": entries}))
    return path


def test_probe_and_eval(tmp_path, capsys):
    train, test = _probe_data(tmp_path, 4, 0), _probe_data(tmp_path, 2, 0)
    out = tmp_path / "probe.npz"
    assert main(["probe", "--train", str(train), "--test", str(test), "--assembly", "concat-self",
                 "--epochs", "30", "--out", str(out)]) == 0
    rec = json.loads(out.with_name("probe.npz.run.json").read_text())
    assert rec["metrics"]["aAcc"] >= 0.99
    assert main(["eval", "--probe", str(out), "--data", str(test), "--assembly", "concat-self"]) == 0
    assert main(["probe", "--train", str(train), "--assembly", "concat"]) == 2
    gt = tmp_path / "l0_0.npy"
    capsys.readouterr()
    assert main(["eval", "--pred", str(gt), "--gt", str(gt)]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["metrics"]["mIoU"] == 1.0


def test_viz(tmp_path):
    src = tmp_path / "f.fmap"
    fio.save_fmap(src, np.random.default_rng(2).normal(size=(5, 5, 8)))
    assert main(["viz", str(src), "--out", str(tmp_path / "v.png")]) == 0
    assert fio.load_png(tmp_path / "v.png").shape == (5, 5, 3)
    assert main(["viz", str(tmp_path / "missing.fmap"), "--out", str(tmp_path / "w.png")]) == 2
