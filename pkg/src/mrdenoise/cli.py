"""Command-line entry point: ``mrdenoise <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 file I/O or format,
5 numerical failure (non-finite loss), 6 any other package error.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from mrdenoise import __version__, kernels
from mrdenoise.checkpoint import load_checkpoint
from mrdenoise.data import (
    VolumePairs,
    generate_phantom_set,
    list_volumes,
    load_volume,
    prepare_dataset,
    save_volume,
)
from mrdenoise.errors import ConfigError, DenoiseError, DimensionError, NumericalError
from mrdenoise.model import ModelConfig
from mrdenoise.noise import NoiseSpec, add_rician, derive_seed
from mrdenoise.train import (
    TrainConfig,
    _threads,
    ablate,
    denoise_volume,
    evaluate_params,
    from_checkpoint,
    noisy_baseline,
    train,
)

log = logging.getLogger("mrdenoise")

EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5
EXIT_OTHER = 6


# ---------------------------------------------------------------------------
# helpers


def parse_shape(text):
    try:
        shape = tuple(int(s) for s in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"shape must look like HxWxC, got {text!r}") from None
    if len(shape) != 3 or min(shape) < 1:
        raise ConfigError(f"shape must be three positive sizes HxWxC, got {text!r}")
    return shape


def load_config(path=None, **overrides):
    """TrainConfig from a JSON file plus flag overrides.

    The ``model`` block is overlaid on the desk preset unless the file sets
    ``"preset": "full"``, in which case the full-size defaults are the base.
    """
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
    preset = data.pop("preset", "desk")
    model = data.pop("model", {})
    unknown = set(model) - set(ModelConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    if preset == "desk":
        model_cfg = ModelConfig.desk(**model)
    elif preset == "full":
        model_cfg = ModelConfig(**model)
    else:
        raise ConfigError(f"preset must be 'desk' or 'full', got {preset!r}")
    unknown = set(data) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    config = TrainConfig(model=model_cfg, **data)
    config = replace(config, **{k: v for k, v in overrides.items() if v is not None})
    return config.validate()


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def write_manifest(path, subcommand, started, config=None, seed=None, inputs=(), outputs=(), extra=None):
    """Record what ran; wall-clock fields are the only non-reproducible content."""
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "timing": {"started_unix": round(started, 3), "wall_seconds": round(time.time() - started, 3)},
    }
    if extra:
        manifest.update(extra)
    write_json(manifest, path)
    return manifest


def _sidecar(path):
    path = Path(path)
    return path.parent / f"{path.name}.manifest.json"


def _load_clean_dir(directory):
    return {vid: load_volume(p) for vid, p in list_volumes(directory).items()}


def _prepare(config, data_dir):
    clean = _load_clean_dir(data_dir)
    return prepare_dataset(clean, config.n_train, config.n_val, config.n_test,
                           config.noise_level, config.seed, config.noise_levels)


def _window(volume):
    lo, hi = float(volume.min()), float(volume.max())
    return lo, (hi if hi > lo else lo + 1.0)


def to_gray(img, window):
    lo, hi = window
    scaled = np.clip((np.asarray(img, np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255.0).astype(np.uint8)


def write_triptychs(vid, clean, noisy, denoised, out_dir):
    """One PNG per slice: clean | noisy | denoised, all windowed by the clean range."""
    from PIL import Image

    window = _window(clean)
    paths = []
    for k in range(clean.shape[2]):
        panel = np.concatenate([to_gray(v[:, :, k], window) for v in (clean, noisy, denoised)], axis=1)
        path = Path(out_dir) / f"{vid}_slice{k}.png"
        Image.fromarray(panel, mode="L").save(path)
        paths.append(path)
    return window, paths


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_phantoms(args):
    started = time.time()
    shape = parse_shape(args.shape)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    phantoms = generate_phantom_set(args.count, seed=args.seed, shape=shape, n_lesions=args.lesions)
    written = []
    for vid, (clean, mask) in phantoms.items():
        save_volume(clean, out / f"{vid}.vol")
        save_volume(mask, out / f"{vid}_mask.vol")
        written += [out / f"{vid}.vol", out / f"{vid}_mask.vol"]
    config = {"count": args.count, "shape": list(shape), "lesions": args.lesions, "normalised_to": [0.0, 1.0]}
    write_manifest(out / "manifest.json", "generate-phantoms", started, config, args.seed, outputs=written)
    print(f"wrote {len(phantoms)} phantoms to {out}")
    return 0


def cmd_add_noise(args):
    started = time.time()
    spec = NoiseSpec(args.level, args.seed)  # validates the level up front
    src = Path(args.inp)
    if src.is_dir():
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        written, seeds = [], {}
        for i, (vid, path) in enumerate(list_volumes(src).items()):
            seeds[vid] = derive_seed(args.seed, i)
            save_volume(add_rician(load_volume(path), NoiseSpec(args.level, seeds[vid])), out / f"{vid}.vol")
            written.append(out / f"{vid}.vol")
        manifest_path = out / "manifest.json"
        extra = {"volume_seeds": seeds}
    else:
        if not src.exists():
            raise FileNotFoundError(f"input not found: {src}")
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_volume(add_rician(load_volume(src), spec), args.out)
        written = [Path(args.out)]
        manifest_path = _sidecar(args.out)
        extra = None
    write_manifest(manifest_path, "add-noise", started, {"level": args.level}, args.seed, [src], written, extra)
    print(f"wrote {len(written)} noisy volume(s)")
    return 0


def cmd_train(args):
    started = time.time()
    config = load_config(args.config, epochs=args.epochs, seed=args.seed, noise_level=args.noise_level)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split, data = _prepare(config, args.data_dir)
    write_json(split.to_dict(), out / "split.json")
    noisy_dir = out / "test_noisy"
    noisy_dir.mkdir(exist_ok=True)
    for vid, vol in zip(data["test"].ids, data["test"].noisy):
        save_volume(vol, noisy_dir / f"{vid}.vol")

    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(config, data, out, resume=resume)

    report = {}
    if len(data["test"]):
        _, best = from_checkpoint(result.best)
        with _threads(config.deterministic):
            denoised, _ = evaluate_params(best.params, config.model, data["test"], config.eval_stride,
                                          config.eval_batch_size)
        report = {"checkpoint": "best.ckpt", "best_epoch": result.state.best_epoch,
                  "noise_level": config.noise_level, "stride": config.eval_stride,
                  "denoised": denoised.to_dict(), "noisy": noisy_baseline(data["test"]).to_dict()}
        write_json(report, out / "test_report.json")
    outputs = [out / n for n in ("best.ckpt", "last.ckpt", "loss.csv", "split.json", "test_report.json")]
    write_manifest(out / "manifest.json", "train", started, config.to_dict(), config.seed,
                   [args.data_dir] + ([args.resume] if args.resume else []), outputs)
    means = result.epoch_means()
    if means:
        print(f"trained {len(means)} epochs; epoch-mean loss {means[0]:.5f} -> {means[-1]:.5f}")
    if report:
        print(f"test PSNR {report['denoised']['mean']['psnr']} dB (noisy {report['noisy']['mean']['psnr']})")
    return 0


def _denoise_files(ckpt_path, stride):
    config, state = from_checkpoint(load_checkpoint(ckpt_path))
    stride = stride or config.eval_stride

    def run(volume):
        with _threads(config.deterministic):
            return denoise_volume(volume, config.model, state.params, stride, config.eval_batch_size)

    return config, state, stride, run


def cmd_denoise(args):
    started = time.time()
    config, _, stride, run = _denoise_files(args.checkpoint, args.stride)
    src = Path(args.inp)
    if src.is_dir():
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for vid, path in list_volumes(src).items():
            save_volume(run(load_volume(path)), out / f"{vid}.vol")
            written.append(out / f"{vid}.vol")
        manifest_path = out / "manifest.json"
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        save_volume(run(load_volume(src)), args.out)
        written = [Path(args.out)]
        manifest_path = _sidecar(args.out)
    write_manifest(manifest_path, "denoise", started, {"stride": stride, "model": config.model.to_dict()},
                   config.seed, [args.checkpoint, src], written)
    print(f"denoised {len(written)} volume(s)")
    return 0


def cmd_evaluate(args):
    started = time.time()
    config, state, stride, _ = _denoise_files(args.checkpoint, args.stride)
    clean_paths = list_volumes(args.clean_dir)
    noisy_paths = list_volumes(args.noisy_dir)
    missing = sorted(set(noisy_paths) - set(clean_paths))
    if missing:
        raise FileNotFoundError(f"no clean volume in {args.clean_dir} for {missing}")
    ids = sorted(noisy_paths)
    pairs = VolumePairs(ids, [load_volume(clean_paths[i]) for i in ids], [load_volume(noisy_paths[i]) for i in ids])
    for vid, c, n in zip(ids, pairs.clean, pairs.noisy):
        if c.shape != n.shape:
            raise DimensionError(f"{vid}: clean {c.shape} vs noisy {n.shape}")
    with _threads(config.deterministic):
        report, denoised = evaluate_params(state.params, config.model, pairs, stride, config.eval_batch_size)
    result = {"checkpoint": str(args.checkpoint), "stride": stride,
              "denoised": report.to_dict(), "noisy": noisy_baseline(pairs).to_dict()}
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_json(result, args.report)
    outputs = [Path(args.report)]
    windows = {}
    if args.png_dir:
        Path(args.png_dir).mkdir(parents=True, exist_ok=True)
        for vid, c, n, d in zip(ids, pairs.clean, pairs.noisy, denoised):
            window, paths = write_triptychs(vid, c, n, d, args.png_dir)
            windows[vid] = list(window)
            outputs += paths
    write_manifest(_sidecar(args.report), "evaluate", started, {"stride": stride, "model": config.model.to_dict()},
                   config.seed, [args.checkpoint, args.clean_dir, args.noisy_dir], outputs,
                   {"png_window": {"kind": "clean min-max", "per_volume": windows}} if windows else None)
    print(f"mean PSNR {result['denoised']['mean']['psnr']} dB, SSIM {result['denoised']['mean']['ssim']:.4f}")
    return 0


def cmd_ablate(args):
    started = time.time()
    config = load_config(args.config, epochs=args.epochs, seed=args.seed)
    _, data = _prepare(config, args.data_dir)
    table = ablate(config, data, args.out_dir)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    write_json(table.to_dict(), report)
    report.with_suffix(".md").write_text(table.to_markdown() + "\n")
    write_manifest(_sidecar(report), "ablate", started, config.to_dict(), config.seed, [args.data_dir],
                   [report, report.with_suffix(".md")])
    print(table.to_markdown())
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="mrdenoise", description="Hybrid MLP-CNN denoising of 3D MR volumes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-phantoms", help="write synthetic lesion phantoms")
    g.add_argument("--count", type=int, default=30)
    g.add_argument("--shape", default="64x64x6", help="HxWxC")
    g.add_argument("--lesions", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate_phantoms)

    n = sub.add_parser("add-noise", help="add Rician noise to a volume or a directory of volumes")
    n.add_argument("--in", dest="inp", required=True)
    n.add_argument("--level", type=float, required=True, help="fraction of the volume maximum, e.g. 0.15")
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_add_noise)

    t = sub.add_parser("train", help="train on a directory of clean volumes")
    t.add_argument("--config")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--noise-level", type=float)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("denoise", help="denoise a volume or a directory of volumes")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--stride", type=int)
    d.set_defaults(func=cmd_denoise)

    e = sub.add_parser("evaluate", help="score a checkpoint on clean/noisy volume pairs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--clean-dir", required=True)
    e.add_argument("--noisy-dir", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--png-dir")
    e.add_argument("--stride", type=int)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and compare MLP+MLP, CNN+CNN and MLP+CNN")
    a.add_argument("--config")
    a.add_argument("--data-dir", required=True)
    a.add_argument("--report", required=True)
    a.add_argument("--out-dir", help="keep each variant's checkpoints here")
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DenoiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
