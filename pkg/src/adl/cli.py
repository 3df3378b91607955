"""Command-line entry point: ``adl <command> ...``."""

from __future__ import annotations

import argparse
import configparser
import contextlib
import csv
import dataclasses
import hashlib
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .atw import atw_decompose_array
from .autodiff import Tensor, sequential
from .checkpoint import CheckpointError, load_network, read_checkpoint
from .gradcheck import REGISTRY, TOLERANCE, run_all
from .imageio import ImageData, ImageFormatError, default_data_dir, extract_patches, list_images, load_image, save_image, to_gray
from .metrics import psnr, ssim
from .noise import KINDS, NoiseSpec, substream
from .train import Engine, TrainConfig, config_from_strings, config_to_strings, content_enhancer_diagnostic
from .unet import crop_to, pad_to_multiple

log = logging.getLogger("adl")

MANIFEST_FORMAT = "adl-run-manifest"
MANIFEST_VERSION = 1
LOG_SCHEMA = "adl-train-log v1"
# manifest sections that are not training keys
RESERVED_SECTIONS = ("manifest", "inputs", "outputs")

LOG_COLUMNS = (
    ["kind", "step", "epoch", "lr", "g_total"]
    + [f"{t}_s{s}" for s in (1, 2, 3) for t in ("l1", "pyr", "hist")]
    + ["adv", "d_total", "d_bridge", "d_dec1", "d_dec2", "d_dec3"]
    + ["val_psnr", "val_ssim", "val_psnr_noisy", "val_ssim_noisy"]
)


class CliError(Exception):
    pass


# -------------------------------------------------------------- helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_manifest(path, command: str, config: dict[str, str], inputs: dict[str, str], outputs: dict[str, str] | None = None):
    """INI manifest with every resolved setting; no timestamps so reruns are byte-identical."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["manifest"] = {"format": MANIFEST_FORMAT, "version": str(MANIFEST_VERSION), "tool_version": __version__, "command": command}
    cp[command] = dict(config)
    cp["inputs"] = dict(inputs)
    if outputs:
        cp["outputs"] = dict(outputs)
    with open(path, "w") as fh:
        cp.write(fh)


def read_config_file(path) -> dict[str, str]:
    """Flatten every non-reserved section of an INI file into one key/value map."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if not cp.read(path):
        raise CliError(f"config file {path} not found")
    values: dict[str, str] = {}
    for section in cp.sections():
        if section in RESERVED_SECTIONS:
            continue
        for k, v in cp[section].items():
            key = k.replace("-", "_")
            if key in values and values[key] != v:
                raise CliError(f"{path}: key {key!r} set twice with different values")
            values[key] = v
    return values


def _train_key_flags(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("training keys (override the config file)")
    for f in dataclasses.fields(TrainConfig):
        default = config_to_strings(TrainConfig())[f.name]
        group.add_argument(
            "--" + f.name.replace("_", "-"), dest="key_" + f.name, metavar="V", default=None, help=f"default: {default}"
        )


def resolve_train_config(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, "key_" + f.name)
        if v is not None:
            values[f.name] = v
    try:
        return config_from_strings(values)
    except (TypeError, ValueError) as e:
        raise CliError(f"bad configuration: {e}") from e


def collect_patches(files: list[Path], cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation patch pools drawn evenly from ``files``."""
    images = []
    for p in files:
        img = load_image(p)
        if cfg.channels == 1 and img.channels == 3:
            img = to_gray(img)
        if img.channels != cfg.channels:
            raise CliError(f"{p}: {img.channels} channels, config expects {cfg.channels}")
        if len(img.spatial) != cfg.rank:
            raise CliError(f"{p}: rank {len(img.spatial)}, config expects {cfg.rank}")
        if min(img.spatial) < cfg.patch_size:
            log.warning("skipping %s: smaller than the %d patch", p.name, cfg.patch_size)
            continue
        images.append((p, img))
    if not images:
        raise CliError("no usable images in the data directory")
    total = cfg.n_patches + cfg.val_patches
    base, extra = divmod(total, len(images))
    pool = []
    for i, (p, img) in enumerate(images):
        count = base + (1 if i < extra else 0)
        if count:
            pool.append(extract_patches(img, cfg.patch_size, count, seed=substream(cfg.seed, "patches", i), source_id=p.name).patches)
    pool = np.concatenate(pool).astype(np.float32)
    pool = pool[substream(cfg.seed, "split").permutation(len(pool))]
    return pool[cfg.val_patches :], pool[: cfg.val_patches]


class TrainLog:
    """CSV training log with a versioned comment header."""

    def __init__(self, path, append: bool = False):
        new = not append or not Path(path).exists()
        self.fh = open(path, "a" if append else "w", newline="")
        self.writer = csv.DictWriter(self.fh, LOG_COLUMNS, restval="", extrasaction="ignore")
        if new:
            self.fh.write(f"# {LOG_SCHEMA}\n")
            self.writer.writeheader()

    def __call__(self, rec: dict):
        row = {"kind": rec["kind"], "step": rec["step"], "epoch": rec["epoch"], "lr": _fmt(rec["lr"])}
        if rec["kind"] == "step":
            g, d = rec["g"], rec["d"]
            row["g_total"] = _fmt(g.total)
            row.update({k: _fmt(v) for k, v in g.terms.items()})
            row["d_total"] = _fmt(d.total)
            row.update({f"d_{k}": _fmt(v) for k, v in d.terms.items()})
        else:
            v = rec["val"]
            row.update(val_psnr=_fmt(v.psnr), val_ssim=_fmt(v.ssim), val_psnr_noisy=_fmt(v.psnr_noisy), val_ssim_noisy=_fmt(v.ssim_noisy))
        self.writer.writerow(row)
        self.fh.flush()

    def close(self):
        self.fh.close()


def _save_like(src: ImageData, values: np.ndarray) -> ImageData:
    if src.bit_depth is not None:
        values = np.clip(values, 0.0, 1.0)
    return ImageData(values.astype(np.float64), src.bit_depth, src.spacing)


# ------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = resolve_train_config(args)
    data_dir = args.data_dir or default_data_dir()
    if not data_dir:
        raise CliError("no data directory (use --data-dir or set ADL_DATA_DIR)")
    files = list_images(data_dir)
    if not files:
        raise CliError(f"no supported images in {data_dir}")
    train, val = collect_patches(files, cfg)
    log.info("%d training / %d validation patches from %d files", len(train), len(val), len(files))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint"

    if args.resume:
        engine = Engine.load(args.resume)
        if config_to_strings(engine.config) != config_to_strings(cfg):
            raise CliError("resumed checkpoint was trained with a different configuration")
    else:
        engine = Engine(cfg)
    val_noisy = engine.make_validation_set(val) if len(val) else None
    train_log = TrainLog(out / "train_log.csv", append=bool(args.resume))
    engine.log_hook = train_log

    def on_epoch_end(eng, result):
        if result is not None:
            log.info("epoch %d: val psnr %.3f (noisy %.3f) ssim %.4f lr %g", eng.state.epoch, result.psnr, result.psnr_noisy, result.ssim, eng.state.lr)
        if cfg.checkpoint_every and eng.state.epoch % cfg.checkpoint_every == 0:
            eng.save(ckpt)

    try:
        engine.run(train, val, val_noisy, max_steps=args.max_steps, on_epoch_end=on_epoch_end)
    finally:
        train_log.close()
    engine.save(ckpt)
    for p in engine.denoiser.parameters().values():
        if not np.all(np.isfinite(p.data)):
            raise CliError("training produced non-finite parameters")
    inputs = {p.name: sha256_file(p) for p in files}
    if args.resume:
        inputs["resume"] = sha256_file(Path(args.resume) / "tensors.bin")
    write_manifest(
        out / "run_manifest.ini",
        "train",
        config_to_strings(cfg),
        inputs,
        {"checkpoint": sha256_file(ckpt / "tensors.bin"), "steps": str(engine.state.step)},
    )
    print(f"trained {engine.state.step} steps; checkpoint at {ckpt}")
    return 0


def cmd_denoise(args) -> int:
    net = load_network(args.checkpoint, "denoiser")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = net.config
    outputs = {}
    for path in map(Path, args.inputs):
        img = load_image(path)
        if len(img.spatial) != cfg.rank:
            raise CliError(f"{path}: rank {len(img.spatial)} but the network is rank {cfg.rank}")
        if img.channels != cfg.channels:
            raise CliError(f"{path}: {img.channels} channels but the network expects {cfg.channels}")
        dtype = net.parameters()["encoder.0.conv1.weight"].dtype
        padded, spatial = pad_to_multiple(img.values[None].astype(dtype), 4)
        xhat = crop_to(net(Tensor(padded)).image.data, spatial)[0]
        if not np.all(np.isfinite(xhat)):
            raise CliError(f"{path}: non-finite output")
        target = out_dir / path.name
        save_image(target, _save_like(img, xhat))
        outputs[path.name] = sha256_file(target)
        print(f"{path} -> {target}")
    ckpt_hash = sha256_file(Path(args.checkpoint) / "tensors.bin")
    write_manifest(
        out_dir / "run_manifest.ini",
        "denoise",
        {"checkpoint": str(args.checkpoint)},
        {"checkpoint": ckpt_hash, **{Path(p).name: sha256_file(p) for p in args.inputs}},
        outputs,
    )
    return 0


def cmd_add_noise(args) -> int:
    img = load_image(args.input)
    try:
        spec = NoiseSpec(args.kind, args.sigma / 255.0, args.nu / 255.0, args.seed, args.magnitude)
    except ValueError as e:
        raise CliError(str(e)) from e
    y = spec.apply(img.values)
    if not np.all(np.isfinite(y)):
        raise CliError("non-finite noisy image")
    save_image(args.output, _save_like(img, y))
    write_manifest(
        str(args.output) + ".manifest.ini",
        "add-noise",
        {"kind": args.kind, "sigma": repr(args.sigma), "nu": repr(args.nu), "magnitude": str(args.magnitude).lower(), "seed": str(args.seed)},
        {Path(args.input).name: sha256_file(args.input)},
        {Path(args.output).name: sha256_file(args.output)},
    )
    return 0


def cmd_metrics(args) -> int:
    a, b = load_image(args.a), load_image(args.b)
    if a.values.shape != b.values.shape:
        raise CliError(f"shape mismatch {a.values.shape} vs {b.values.shape}")
    p = psnr(a.values, b.values)
    s = ssim(a.values, b.values, channel_axis=0)
    if args.csv:
        print("a,b,psnr_db,ssim")
        print(f"{args.a},{args.b},{_fmt(p)},{s!r}")
    else:
        print(f"PSNR {'inf' if math.isinf(p) else f'{p:.4f}'} dB")
        print(f"SSIM {s:.6f}")
    return 0


def cmd_atw(args) -> int:
    img = load_image(args.input)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    details = [[] for _ in range(args.levels)]
    approx = []
    for ch in img.values:
        cs, ds = atw_decompose_array(ch, args.levels)
        approx.append(cs[-1])
        for j, d in enumerate(ds):
            details[j].append(d)
    outputs = {}
    for j, d in enumerate(details, start=1):
        target = out_dir / f"{stem}_detail{j}.vol"
        save_image(target, ImageData(np.stack(d), None, img.spacing))
        outputs[target.name] = sha256_file(target)
    target = out_dir / f"{stem}_approx{args.levels}.vol"
    save_image(target, ImageData(np.stack(approx), None, img.spacing))
    outputs[target.name] = sha256_file(target)
    write_manifest(out_dir / "run_manifest.ini", "atw", {"levels": str(args.levels)}, {Path(args.input).name: sha256_file(args.input)}, outputs)
    for name in outputs:
        print(out_dir / name)
    return 0


def cmd_gradcheck(args) -> int:
    unknown = set(args.only or ()) - set(REGISTRY)
    if unknown:
        raise CliError(f"unknown checks: {', '.join(sorted(unknown))}")
    results = run_all(args.seed, args.only)
    failed = 0
    if args.csv:
        print("name,rel_error,status")
    for name, err in results.items():
        ok = err < args.tolerance
        failed += not ok
        status = "pass" if ok else "FAIL"
        print(f"{name},{err:.3e},{status}" if args.csv else f"{name:32s} {err:10.3e}  {status}")
    if not args.csv:
        print(f"{len(results) - failed}/{len(results)} checks under {args.tolerance:g}")
    return 1 if failed else 0


def cmd_diagnose(args) -> int:
    _, meta = read_checkpoint(args.checkpoint)
    if meta.get("state.step", "1") == "0":
        warnings.warn("checkpoint holds an untrained denoiser", RuntimeWarning, stacklevel=1)
    net = load_network(args.checkpoint, "denoiser")
    img = load_image(args.image)
    if net.config.channels == 1 and img.channels == 3:
        img = to_gray(img)
    values = pad_to_multiple(img.values[None], 4)[0][0]
    sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    rows = content_enhancer_diagnostic(net, values, sigmas, args.seed, args.filters)
    n = len(rows[0].correlations)
    if args.csv:
        print(",".join(["sigma", "mean_corr"] + [f"filter{i + 1}" for i in range(n)]))
        for r in rows:
            print(",".join([_fmt(r.sigma), f"{r.mean_correlation:.6f}"] + [f"{c:.6f}" for c in r.correlations]))
    else:
        print(f"{'sigma':>6} {'mean':>8} " + " ".join(f"{'f' + str(i + 1):>8}" for i in range(n)))
        for r in rows:
            print(f"{r.sigma:6g} {r.mean_correlation:8.4f} " + " ".join(f"{c:8.4f}" for c in r.correlations))
    return 0


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adl", description="Adversarially trained image denoiser toolkit.")
    parser.add_argument("--version", action="version", version=f"adl {__version__}")
    parser.add_argument("--sequential", action="store_true", help="single-threaded BLAS for bit-exact reruns (default: off)")
    parser.add_argument("--log-level", default="INFO", help="logging level (default: INFO)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("train", help="train a denoiser/discriminator pair")
    p.add_argument("--config", help="INI file of training keys (default: none)")
    p.add_argument("--data-dir", help="directory of training images (default: $ADL_DATA_DIR)")
    p.add_argument("--out", default="adl_run", help="output directory (default: adl_run)")
    p.add_argument("--resume", help="checkpoint directory to continue from (default: none)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps (default: no limit)")
    _train_key_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise images with a trained checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--out-dir", required=True, help="directory for outputs (names mirror the inputs)")
    p.add_argument("inputs", nargs="+", help="input images (.pgm .ppm .png .vol)")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("add-noise", help="degrade an image with seeded synthetic noise")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--kind", choices=KINDS, default="gaussian", help="noise model (default: gaussian)")
    p.add_argument("--sigma", type=float, default=25.0, help="noise scale in 8-bit units (default: 25)")
    p.add_argument("--nu", type=float, default=0.0, help="Rician offset in 8-bit units (default: 0)")
    p.add_argument("--magnitude", action="store_true", help="Rician magnitude model instead of additive (default: off)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default: 0)")
    p.set_defaults(func=cmd_add_noise)

    p = sub.add_parser("metrics", help="PSNR and SSIM between two images")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--csv", action="store_true", help="comma-separated output (default: off)")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("atw", help="write the a trous detail layers of an image")
    p.add_argument("input")
    p.add_argument("--levels", type=int, default=4, help="number of detail layers (default: 4)")
    p.add_argument("--out-dir", required=True, help="directory for .vol outputs")
    p.set_defaults(func=cmd_atw)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0, help="seed for the random inputs (default: 0)")
    p.add_argument("--tolerance", type=float, default=TOLERANCE, help=f"max relative error (default: {TOLERANCE:g})")
    p.add_argument("--only", nargs="*", metavar="NAME", help="run only these checks (default: all)")
    p.add_argument("--csv", action="store_true", help="comma-separated output (default: off)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("diagnose", help="content-enhancer correlation table across noise levels")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--image", required=True, help="clean probe image")
    p.add_argument("--sigmas", default="0,5,10,15,25,35,50", help="noise levels in 8-bit units (default: 0,5,10,15,25,35,50)")
    p.add_argument("--filters", type=int, default=4, help="number of tracked filters (default: 4)")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default: 0)")
    p.add_argument("--csv", action="store_true", help="comma-separated output (default: off)")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    ctx = sequential() if args.sequential else contextlib.nullcontext()
    try:
        with ctx:
            return args.func(args)
    except (CliError, CheckpointError, ImageFormatError, FileNotFoundError, ValueError) as e:
        print(f"adl: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
