"""Command-line front end: train, hide, reveal, evaluate, fixture.

Exit codes: 0 ok, 1 other failure, 2 usage/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .image_io import (
    DatasetManifest,
    ImageCache,
    ImageFormatError,
    ImageReadError,
    concat_pair,
    from_tensor,
    load_image,
    residual_image,
    save_png,
    to_tensor,
)
from .metrics import (
    MetricsReport,
    capacity_table,
    format_quality_table,
    histogram256,
    psnr,
    render_histograms,
    write_capacity_csv,
    write_histogram_csv,
)
from .network import NetworkConfig, StegoNet
from .training import (
    Checkpoint,
    CheckpointError,
    HyperParams,
    NonFiniteLossError,
    load_checkpoint,
    train_loop,
)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
RESIDUAL_GAINS = (1, 10, 20)
THREADS_ENV = "DENSE_STEGO_THREADS"

log = logging.getLogger("dense_stego")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="dense-stego", description="Full-size image-in-image steganography.")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", parents=[common], help="train encoder and decoder on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--preset", choices=("paper", "desk"), default="desk")
    tr.add_argument("--epochs", type=_non_negative_int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--beta", type=float)
    tr.add_argument("--batch", type=_positive_int)
    tr.add_argument("--size", type=_positive_int, help="square image size (overrides the preset)")
    tr.add_argument("--checkpoint-every", type=_non_negative_int, default=0)

    hide = sub.add_parser("hide", parents=[common], help="embed a secret image in a carrier")
    hide.add_argument("--checkpoint", required=True)
    hide.add_argument("--carrier", required=True)
    hide.add_argument("--secret", required=True)
    hide.add_argument("--size", type=_positive_int)

    rev = sub.add_parser("reveal", parents=[common], help="extract the secret from a stego image")
    rev.add_argument("--checkpoint", required=True)
    rev.add_argument("--stego", required=True)

    ev = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM tables, residuals and histograms")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--plot", action="store_true", help="also render histogram charts")

    fx = sub.add_parser("fixture", parents=[common], help="write the synthetic desk-scale image set")
    fx.add_argument("--images", type=_positive_int, default=16)
    fx.add_argument("--size", type=_positive_int, default=32, help="manifest resize target")
    return parser


def _png_target(out: str, default_name: str) -> Path:
    path = Path(out)
    if path.suffix == "":
        return path / default_name
    if path.suffix.lower() != ".png":
        raise UsageError(f"refusing to write {path}: stego/recovered images are PNG only "
                         f"(lossy formats such as JPEG destroy the payload)")
    return path


def _load_manifest(path: str) -> DatasetManifest:
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        return DatasetManifest.load(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_ckpt(path: str) -> Checkpoint:
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_train(args) -> int:
    manifest = _load_manifest(args.manifest)
    overrides = {} if args.size is None else {"image_size": args.size}
    try:
        config = NetworkConfig.from_preset(args.preset, **overrides)
        hp_over = {"seed": args.seed, "checkpoint_every": args.checkpoint_every}
        for key, val in (("epochs", args.epochs), ("learning_rate", args.lr), ("beta", args.beta),
                         ("batch_size", args.batch)):
            if val is not None:
                hp_over[key] = val
        hp = HyperParams.from_preset(args.preset, **hp_over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if len(manifest) == 0:
        raise UsageError(f"manifest {args.manifest} has no pairs")
    out = Path(args.out)
    result = train_loop(manifest, config, hp, out_dir=out)
    print(f"wrote {out / 'checkpoint.dsc'} and {out / 'loss.csv'} ({len(result.log)} steps)")
    return EXIT_OK


def _hide(net: StegoNet, carrier, secret):
    return from_tensor(net.encoder(concat_pair(to_tensor(carrier), to_tensor(secret))))


def cmd_hide(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    size = ckpt.config.image_size
    if args.size is not None and args.size != size:
        raise UsageError(f"--size {args.size} does not match the checkpoint's configured size {size}")
    target = _png_target(args.out, "stego.png")
    carrier = load_image(args.carrier, size)
    secret = load_image(args.secret, size)
    net = ckpt.build_network()
    stego = _hide(net, carrier, secret)
    save_png(stego, target)
    print(f"wrote {target}  carrier-vs-stego PSNR {psnr(carrier, stego):.3f} dB")
    return EXIT_OK


def cmd_reveal(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    size = ckpt.config.image_size
    target = _png_target(args.out, "recovered.png")
    stego = load_image(args.stego)
    if stego.shape[:2] != (size, size):
        raise ValueError(f"stego image is {stego.shape[1]}x{stego.shape[0]} but the checkpoint "
                         f"expects {size}x{size}")
    net = ckpt.build_network()
    recovered = from_tensor(net.decoder(to_tensor(stego)))
    save_png(recovered, target)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    manifest = _load_manifest(args.manifest)
    if len(manifest) == 0:
        raise UsageError(f"manifest {args.manifest} has no pairs")
    size = ckpt.config.image_size
    net = ckpt.build_network()
    out = Path(args.out)
    cache = ImageCache(manifest, size)
    report = MetricsReport()
    for i, (cpath, spath) in enumerate(manifest.pairs):
        carrier, secret = cache.get(cpath), cache.get(spath)
        if carrier is None or secret is None:
            continue
        pid = f"pair_{i:03d}"
        stego = _hide(net, carrier, secret)
        recovered = from_tensor(net.decoder(to_tensor(stego)))
        report.add(pid, carrier, stego, secret, recovered)
        save_png(stego, out / "images" / f"{pid}_stego.png")
        save_png(recovered, out / "images" / f"{pid}_recovered.png")
        for gain in RESIDUAL_GAINS:
            save_png(residual_image(stego, carrier, gain), out / "residuals" / f"{pid}_gain{gain:02d}.png")
        images = {"carrier": carrier, "stego": stego, "secret": secret, "recovered": recovered}
        for role, img in images.items():
            write_histogram_csv(histogram256(img), out / "histograms" / f"{pid}_{role}.csv")
        if args.plot:
            render_histograms(images, out / "histograms" / f"{pid}.png")
    if not report.rows:
        raise ValueError("no readable image pairs in the manifest")
    report.write_csv(out / "quality.csv")
    write_capacity_csv(capacity_table(size, size), out / "capacity.csv")
    print(format_quality_table(report))
    avg = report.averages()
    print(f"carrier-vs-secret baseline PSNR {avg.baseline_psnr:.3f} dB")
    return EXIT_OK


def cmd_fixture(args) -> int:
    from .fixtures import write_fixture

    manifest = write_fixture(args.out, n_images=args.images, seed=args.seed, manifest_size=args.size)
    print(f"wrote {len(manifest)} pairs to {Path(args.out) / 'manifest.json'}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "hide": cmd_hide, "reveal": cmd_reveal, "evaluate": cmd_evaluate,
            "fixture": cmd_fixture}


def _thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(_thread_cap()):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dense-stego {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"dense-stego {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, ImageReadError, ImageFormatError, ValueError, OSError) as exc:
        print(f"dense-stego {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
