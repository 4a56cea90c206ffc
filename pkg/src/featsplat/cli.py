"""``featsplat`` command line.

Every command writes a JSON run record (arguments, version, seed, outputs and
metrics) next to its main output, or to ``--record``. Exit codes: 0 ok,
2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as fio
from .extractor import FinetuneConfig, SceneLibrary, ToyPatchEncoder, finetune, mean_target_l1
from .probe import (
    STRATEGIES, DepthProbe, SegProbe, assemble, metrics_depth, metrics_seg, pca_visualize, predict_depth,
    train_depth_probe, train_seg_probe,
)
from .raster import rasterize_features, rasterize_rgb
from .scene import ConfigurationError, decoder_apply
from .trainer import DivergenceError, FitConfig, fit_scene, initial_scene_for

log = logging.getLogger("featsplat")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def version_string() -> str:
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5,
        )
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{__version__}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _jsonable(x):
    if isinstance(x, Path):
        return str(x)
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    return x


def write_record(args, outputs: dict, metrics: dict | None = None, config: dict | None = None,
                 default_path: Path | None = None) -> dict:
    argv = {k: v for k, v in vars(args).items() if k not in ("func",)}
    record = {
        "command": args.command,
        "version": version_string(),
        "seed": getattr(args, "seed", None),
        "args": argv,
        "config": config or {},
        "outputs": outputs,
        "metrics": metrics or {},
    }
    path = args.record or default_path
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(_jsonable(record), indent=2))
    print(json.dumps(_jsonable({"command": args.command, "outputs": outputs, "metrics": metrics or {}})))
    return record


def _record_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".run.json")


def _load_camera(args):
    if args.camera:
        return fio.camera_from_dict(json.loads(Path(args.camera).read_text()))
    if args.manifest:
        m = fio.read_manifest(args.manifest, check_files=False)
        return m.views[args.view]
    raise ConfigurationError("give --camera or --manifest/--view for the render pose")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .synth import make_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fs = args.feature_size or max(args.size // 4, 1)
    ds = make_dataset(args.num_gaussians, args.feature_dim, args.views, args.size, args.size, (fs, fs),
                      args.map_channels, seed=args.seed)
    views = []
    for i, (v, img, fm) in enumerate(zip(ds.views, ds.images, ds.feature_maps)):
        fio.save_png(out / f"view_{i:03d}.png", img)
        fio.save_fmap(out / f"view_{i:03d}.fmap", fm)
        v.image_path, v.feature_path = f"view_{i:03d}.png", f"view_{i:03d}.fmap"
        views.append(v)
    manifest = fio.SceneManifest(f"synth-{args.seed}", ds.feature_maps[0].shape[2], views, out)
    fio.write_manifest(out / "manifest.json", manifest)
    fio.save_scene(out / "ground_truth.gspl", ds.scene)
    write_record(args, {"manifest": str(out / "manifest.json"), "ground_truth": str(out / "ground_truth.gspl")},
                 default_path=out / "synth.run.json")
    return EXIT_OK


def fit_config_from_args(args) -> FitConfig:
    cfg = FitConfig(
        iterations=args.iterations, feature_dim=args.feature_dim, allow_any_feature_dim=args.allow_any_feature_dim,
        densify=not args.no_densify, rgb_weight=args.rgb_weight, feature_weight=args.feature_weight,
        lambda_dssim=args.lambda_dssim, log_every=args.log_every, seed=args.seed,
    )
    for name in ("lr_feature", "lr_decoder"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    cfg.validate()
    return cfg


def cmd_fit(args) -> int:
    manifest = fio.read_manifest(args.manifest)
    images = manifest.load_images()
    maps = manifest.load_feature_maps()
    cfg = fit_config_from_args(args)
    if args.init:
        init = fio.load_scene(args.init)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(args.seed).spawn(3)[2])
        init = initial_scene_for(manifest.views, cfg.feature_dim, manifest.feature_channels, args.num_gaussians, rng,
                                 sh_degree=args.sh_degree)
    log_path = Path(args.out).with_suffix(".metrics.jsonl")
    history = []

    def on_record(rec):
        history.append(rec)
        log.info("iter %d  gaussians %d  %s", rec["iteration"], rec["num_gaussians"],
                 "  ".join(f"{k} {v:.5g}" for k, v in rec.items() if k not in ("iteration", "num_gaussians")))

    t0 = time.perf_counter()
    scene, _ = fit_scene(manifest.views, images, maps, cfg, init, callback=on_record)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fio.save_scene(args.out, scene)
    log_path.write_text("".join(json.dumps(r) + "\n" for r in history))
    final = history[-1] if history else {}
    write_record(args, {"checkpoint": str(args.out), "metric_log": str(log_path)},
                 {**final, "seconds": time.perf_counter() - t0}, cfg.to_dict(), _record_path(args.out))
    return EXIT_OK


def cmd_render(args) -> int:
    scene = fio.load_scene(args.checkpoint)
    cam = _load_camera(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.mode == "rgb":
        fio.save_png(out, rasterize_rgb(scene, cam).image)
        info = {"channels": 3}
    else:
        w = args.feature_width or cam.width
        h = args.feature_height or cam.height
        low = rasterize_features(scene, cam, w, h).image
        fmap = low if args.mode == "feature" else decoder_apply(scene.decoder, low)
        if args.mode == "pca":
            fio.save_png(out, pca_visualize(fmap))
            info = {"channels": 3}
        else:
            fio.save_fmap(out, fmap)
            info = {"channels": int(fmap.shape[2])}
    write_record(args, {"image": str(out)}, info, default_path=_record_path(out))
    return EXIT_OK


def _library_from_manifests(paths, extractor) -> SceneLibrary:
    scenes, views, images, sizes = [], [], [], []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if "checkpoint" not in doc:
            raise ConfigurationError(f"{p}: library manifests need a 'checkpoint' field")
        m = fio.read_manifest(p, check_files=False)
        scene = fio.load_scene(m.resolve(doc["checkpoint"]))
        if scene.decoder.out_channels != extractor.out_dim:
            raise ConfigurationError(
                f"{p}: decoder outputs {scene.decoder.out_channels} channels, extractor {extractor.out_dim}")
        scenes.append(scene)
        views.append(m.views)
        images.append(m.load_images())
        gh, gw = extractor.grid_shape(m.views[0].height, m.views[0].width)
        sizes.append((gw, gh))
    return SceneLibrary(scenes, views, images, sizes)


def cmd_finetune(args) -> int:
    if not args.library:
        raise ConfigurationError("scene library is empty")
    if args.extractor:
        enc = fio.load_extractor(args.extractor)
    else:
        enc = ToyPatchEncoder.init(out_dim=args.out_dim, patch_size=args.patch_size, seed=args.seed)
    lib = _library_from_manifests(args.library, enc)
    if len(lib) == 0:
        raise ConfigurationError("scene library is empty")
    cfg = FinetuneConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size, epochs=args.epochs,
                         hflip=not args.no_hflip, seed=args.seed, max_steps=args.max_steps)
    cfg.validate()
    before = mean_target_l1(enc, lib)
    losses = []
    tuned = finetune(enc, lib, cfg, callback=lambda r: losses.append(r["loss"]))
    after = mean_target_l1(tuned, lib)
    if not np.isfinite(after):
        raise DivergenceError("fine-tuned extractor produces non-finite features")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fio.save_extractor(args.out, tuned)
    write_record(args, {"extractor": str(args.out)},
                 {"l1_before": before, "l1_after": after, "steps": len(losses)}, cfg.to_dict(),
                 _record_path(args.out))
    return EXIT_OK


def _load_array(path):
    path = Path(path)
    if path.suffix == ".fmap":
        return fio.load_fmap(path).astype(np.float64)
    if path.suffix == ".npy":
        return np.load(path)
    return fio.load_labels(path)


def _probe_inputs(data_path, args):
    """Assembled features, global tokens and targets for every entry of a probe dataset file.

    Entries give either precomputed ``features`` / ``tuned_features`` /
    ``global`` files or an ``image`` that the ``--extractor`` and
    ``--tuned-extractor`` checkpoints are run on. Targets are ``labels`` or
    ``depth``.
    """
    doc = json.loads(Path(data_path).read_text())
    root = Path(data_path).parent
    entries = doc["entries"] if isinstance(doc, dict) else doc
    if not entries:
        raise ConfigurationError(f"{data_path}: no entries")
    enc = fio.load_extractor(args.extractor) if args.extractor else None
    tuned_enc = fio.load_extractor(args.tuned_extractor) if args.tuned_extractor else None
    feats, globs, targets = [], [], []
    key = "labels" if args.task == "seg" else "depth"
    for i, e in enumerate(entries):
        res = lambda k: root / e[k]  # noqa: E731
        if "features" in e:
            orig = _load_array(res("features"))
            glob = _load_array(res("global")).ravel() if "global" in e else np.zeros(orig.shape[2])
            tuned = _load_array(res("tuned_features")) if "tuned_features" in e else None
        elif "image" in e and enc is not None:
            img = fio.load_png(res("image"))
            orig, glob = enc.extract(img)
            tuned = tuned_enc.extract(img)[0] if tuned_enc is not None else None
        else:
            raise ConfigurationError(f"{data_path}: entry {i} has neither features nor an image plus --extractor")
        if tuned is None and args.assembly not in ("concat-self",):
            if args.assembly != "none":
                raise ConfigurationError(f"assembly {args.assembly!r} needs tuned features (entry {i})")
        if args.assembly == "none":
            feats.append(orig)
        else:
            feats.append(assemble(orig, tuned, args.assembly))
        globs.append(glob)
        if key not in e:
            raise ConfigurationError(f"{data_path}: entry {i} lacks {key!r}")
        targets.append(_load_array(res(key)))
    return feats, globs, targets


def _save_probe(path, probe) -> None:
    arrays = {"weight": probe.weight, "bias": probe.bias}
    if probe.norm is not None:
        arrays["shift"], arrays["scale"] = probe.norm
    if isinstance(probe, SegProbe):
        arrays["kind"] = np.array("seg")
        if probe.fusion is not None:
            arrays["fusion"] = probe.fusion
    else:
        arrays["kind"] = np.array("depth")
        arrays["range"] = np.array([probe.d_min, probe.d_max])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_probe(path):
    with np.load(path) as z:
        norm = (z["shift"], z["scale"]) if "shift" in z.files else None
        if str(z["kind"]) == "seg":
            return SegProbe(z["weight"], z["bias"], z["fusion"] if "fusion" in z.files else None, norm)
        d_min, d_max = z["range"]
        return DepthProbe(z["weight"], z["bias"], float(d_min), float(d_max), norm)


def _evaluate(probe, feats, globs, targets, task):
    if task == "seg":
        preds = [probe.predict(f, *t.shape[:2]) for f, t in zip(feats, targets)]
        return metrics_seg(preds, targets, num_classes=probe.num_classes)
    preds = [predict_depth(probe, f, g, *t.shape[:2]) for f, g, t in zip(feats, globs, targets)]
    return metrics_depth(preds, targets)


def cmd_probe(args) -> int:
    feats, globs, targets = _probe_inputs(args.train, args)
    if args.task == "seg":
        probe = train_seg_probe(feats, targets, epochs=args.epochs, lr=args.lr or 1.0, num_classes=args.num_classes)
    else:
        probe = train_depth_probe(feats, globs, targets, epochs=args.epochs, lr=args.lr or 100.0)
    if not (np.all(np.isfinite(probe.weight)) and np.all(np.isfinite(probe.bias))):
        raise DivergenceError("probe weights became non-finite; lower --lr")
    metrics = {"train_loss": probe.history[-1]}
    if args.test:
        tf, tg, tt = _probe_inputs(args.test, args)
        metrics.update(_evaluate(probe, tf, tg, tt, args.task))
    outputs = {}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _save_probe(args.out, probe)
        outputs["probe"] = str(args.out)
    write_record(args, outputs, metrics, default_path=_record_path(args.out) if args.out else None)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.probe:
        if not args.data:
            raise ConfigurationError("--probe needs --data")
        probe = _load_probe(args.probe)
        args.task = "seg" if isinstance(probe, SegProbe) else "depth"
        feats, globs, targets = _probe_inputs(args.data, args)
        metrics = _evaluate(probe, feats, globs, targets, args.task)
    else:
        if not args.pred or len(args.pred) != len(args.gt or []):
            raise ConfigurationError("give matching --pred and --gt lists (or --probe with --data)")
        preds = [_load_array(p) for p in args.pred]
        gts = [_load_array(g) for g in args.gt]
        if args.task == "seg":
            metrics = metrics_seg(preds, gts, num_classes=args.num_classes)
        else:
            metrics = metrics_depth(preds, gts)
    write_record(args, {}, metrics)
    return EXIT_OK


def cmd_viz(args) -> int:
    fmap = _load_array(args.features)
    fio.save_png(args.out, pca_visualize(fmap))
    write_record(args, {"image": str(args.out)}, default_path=_record_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="featsplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0, help="single source of all randomness")
        sp.add_argument("--record", type=Path, default=None, help="run record path (JSON)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = add("synth", cmd_synth, "write a synthetic multi-view scene (PNG + FMAP + manifest)")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--num-gaussians", type=int, default=20)
    sp.add_argument("--feature-dim", type=int, default=8)
    sp.add_argument("--map-channels", type=int, default=None, help="channels of the emitted feature maps")
    sp.add_argument("--views", type=int, default=10)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--feature-size", type=int, default=None)

    sp = add("fit", cmd_fit, "fit a feature-Gaussian scene to a manifest")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--init", type=Path, default=None, help="start from this checkpoint")
    sp.add_argument("--iterations", type=int, default=30000)
    sp.add_argument("--feature-dim", type=int, default=64)
    sp.add_argument("--allow-any-feature-dim", action="store_true")
    sp.add_argument("--num-gaussians", type=int, default=2000)
    sp.add_argument("--sh-degree", type=int, default=3)
    sp.add_argument("--no-densify", action="store_true")
    sp.add_argument("--rgb-weight", type=float, default=1.0)
    sp.add_argument("--feature-weight", type=float, default=1.0)
    sp.add_argument("--lambda-dssim", type=float, default=0.2)
    sp.add_argument("--lr-feature", type=float, default=None)
    sp.add_argument("--lr-decoder", type=float, default=None)
    sp.add_argument("--log-every", type=int, default=100)

    sp = add("render", cmd_render, "render a checkpoint from a pose")
    sp.add_argument("checkpoint", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--mode", choices=("rgb", "feature", "feature-high", "pca"), default="rgb")
    sp.add_argument("--camera", type=Path, default=None, help="JSON camera (manifest view fields)")
    sp.add_argument("--manifest", type=Path, default=None)
    sp.add_argument("--view", type=int, default=0)
    sp.add_argument("--feature-width", type=int, default=None)
    sp.add_argument("--feature-height", type=int, default=None)

    sp = add("finetune", cmd_finetune, "fine-tune the patch encoder on rendered features")
    sp.add_argument("library", type=Path, nargs="*", help="scene manifests with a 'checkpoint' field")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--extractor", type=Path, default=None, help="starting checkpoint (default: fresh toy encoder)")
    sp.add_argument("--out-dim", type=int, default=64)
    sp.add_argument("--patch-size", type=int, default=14)
    sp.add_argument("--lr", type=float, default=1e-5)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--batch-size", type=int, default=2)
    sp.add_argument("--epochs", type=int, default=1)
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument("--no-hflip", action="store_true")

    for name, func, help_ in (("probe", cmd_probe, "train a linear probe (optionally evaluate it)"),
                              ("eval", cmd_eval, "compute segmentation or depth metrics")):
        sp = add(name, func, help_)
        sp.add_argument("--task", choices=("seg", "depth"), default="seg")
        sp.add_argument("--assembly", choices=STRATEGIES + ("none",), default="concat")
        sp.add_argument("--extractor", type=Path, default=None)
        sp.add_argument("--tuned-extractor", type=Path, default=None)
        sp.add_argument("--num-classes", type=int, default=None)
        if name == "probe":
            sp.add_argument("--train", type=Path, required=True, help="probe dataset JSON")
            sp.add_argument("--test", type=Path, default=None)
            sp.add_argument("--out", type=Path, default=None)
            sp.add_argument("--epochs", type=int, default=100)
            sp.add_argument("--lr", type=float, default=None)
        else:
            sp.add_argument("--probe", type=Path, default=None)
            sp.add_argument("--data", type=Path, default=None)
            sp.add_argument("--pred", type=Path, nargs="*", default=None)
            sp.add_argument("--gt", type=Path, nargs="*", default=None)

    sp = add("viz", cmd_viz, "PCA visualisation of a feature map")
    sp.add_argument("features", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"featsplat {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, fio.FormatError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"featsplat {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
