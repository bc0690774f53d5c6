"""Command line: build / describe / selftest / train / infer / erf / make-data.

stdout carries machine-parsable `key: value` lines (every run echoes its
resolved config); diagnostics go to stderr. Exit codes: 0 success, 1 usage,
2 data or shape error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="mitseg", description=__doc__)
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread count (default 1 for reproducibility)")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_flags(p):
        group = p.add_mutually_exclusive_group()
        group.add_argument("--variant", default=None,
                           choices=("B0", "B1", "B2", "B3", "B4", "B5", "micro"),
                           help="B0..B5 or 'micro' (desk-scale B0)")
        group.add_argument("--config", default=None, help="config text file")
        p.add_argument("--num-classes", type=int, default=None)
        p.add_argument("--positional-mode", choices=("mix_ffn", "learned_pe"),
                       default=None)
        p.add_argument("--pe-grid", type=int, default=None,
                       help="learned-PE table grid (square), learned_pe mode only")

    p = sub.add_parser("describe", help="parameter and MAC report")
    model_flags(p)
    p.add_argument("--input-size", type=int, default=512)

    p = sub.add_parser("selftest", help="gradient/shape/oracle checks")
    p.add_argument("--level", choices=("quick", "full"), default="quick")

    p = sub.add_parser("build", help="initialize a model and save a checkpoint")
    model_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("train", help="train on a ppm/pgm dataset directory")
    model_flags(p)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--iters", type=int, default=400)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--crop", type=int, default=64)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="CSV training log path")

    p = sub.add_parser("infer", help="sliding-window inference to a label PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="P6 ppm input")
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--stride", type=int, default=32)
    p.add_argument("--out", required=True, help="label map PGM path")

    p = sub.add_parser("erf", help="effective receptive field map")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--stage", default="4", help="1..4 or 'decoder'")
    p.add_argument("--images-dir", required=True, help="directory of P6 images")
    p.add_argument("--out", required=True, help="output PGM path")

    p = sub.add_parser("make-data", help="write a synthetic ppm/pgm dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _resolve_config(args, default_classes=4):
    """builtin variant < config file < command-line flags."""
    from dataclasses import replace

    from .configs import builtin_config, config_from_text, micro_config
    from .errors import ConfigError

    cfg = None
    if args.config:
        with open(args.config) as f:
            cfg = config_from_text(f.read())
    variant = args.variant
    if cfg is None and variant is None:
        variant = "micro"
    if variant is not None:
        pe = None
        mode = args.positional_mode or "mix_ffn"
        if mode == "learned_pe":
            if args.pe_grid is None:
                raise ConfigError("--positional-mode learned_pe needs --pe-grid")
            pe = (args.pe_grid, args.pe_grid)
        n_cls = args.num_classes if args.num_classes is not None else default_classes
        if variant == "micro":
            cfg = micro_config(num_classes=n_cls, positional_mode=mode, pe_grid=pe)
        else:
            cfg = builtin_config(variant, num_classes=n_cls,
                                 positional_mode=mode, pe_grid=pe)
    else:
        overrides = {}
        if args.num_classes is not None:
            overrides["num_classes"] = args.num_classes
        if args.positional_mode is not None:
            overrides["positional_mode"] = args.positional_mode
        if args.pe_grid is not None:
            overrides["pe_grid"] = (args.pe_grid, args.pe_grid)
        if overrides:
            cfg = replace(cfg, **overrides)
    return cfg


def _echo_config(cfg):
    from .configs import config_to_text
    for line in config_to_text(cfg).strip().splitlines():
        key, _, val = line.partition(" = ")
        print(f"config.{key}: {val}")


def _cmd_describe(args) -> int:
    from .model import build, count_macs
    cfg = _resolve_config(args, default_classes=150)
    _echo_config(cfg)
    model = build(cfg, seed=0)
    report = count_macs(model, args.input_size, args.input_size)
    sys.stdout.write(report.render())
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest
    print(f"config.selftest_level: {args.level}")
    return EXIT_OK if run_selftest(args.level) else EXIT_NUMERIC


def _cmd_build(args) -> int:
    from .model import build, count_params, save_checkpoint
    cfg = _resolve_config(args, default_classes=150)
    _echo_config(cfg)
    model = build(cfg, seed=args.seed)
    save_checkpoint(model, args.out)
    print(f"seed: {args.seed}")
    print(f"total_params: {count_params(model).total_params}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .model import build, save_checkpoint
    from .train import TrainSpec, load_dataset, train_toy, write_log_csv
    dataset = load_dataset(args.data_dir)
    n_cls = args.num_classes
    if n_cls is None and args.config is None:
        ids = [s.labels[s.labels != 255] for s in dataset]
        n_cls = max(int(v.max()) for v in ids if v.size) + 1
        args.num_classes = n_cls
    cfg = _resolve_config(args, default_classes=n_cls or 4)
    _echo_config(cfg)
    spec = TrainSpec(total_iters=args.iters, base_lr=args.lr,
                     batch_size=args.batch_size, crop=(args.crop, args.crop),
                     weight_decay=args.weight_decay, augment=not args.no_augment,
                     eval_every=args.eval_every, seed=args.seed)
    model = build(cfg, seed=args.seed)
    log = train_toy(model, dataset, spec)
    save_checkpoint(model, args.out)
    if args.log:
        write_log_csv(log, args.log)
    evals = [r for r in log if r.miou is not None]
    print(f"iterations: {log[-1].iteration + 1}")
    print(f"final_loss: {log[-1].loss:.6f}")
    if evals:
        print(f"train_miou: {evals[-1].miou:.4f}")
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    from .imageio import read_ppm, write_pgm
    from .model import load_checkpoint
    from .train import sliding_window_infer
    model = load_checkpoint(args.ckpt)
    _echo_config(model.config)
    image = read_ppm(args.image)
    logits = sliding_window_infer(model, image, (args.window, args.window),
                                  (args.stride, args.stride))
    labels = logits.argmax(axis=0).astype("uint8")
    write_pgm(args.out, labels)
    print(f"image_size: {image.shape[1]}x{image.shape[2]}")
    print(f"prediction: {args.out}")
    return EXIT_OK


def _cmd_erf(args) -> int:
    from .analysis import compute_erf, save_erf
    from .errors import DataError
    from .imageio import read_ppm
    from .model import load_checkpoint
    model = load_checkpoint(args.ckpt)
    _echo_config(model.config)
    names = sorted(f for f in os.listdir(args.images_dir) if f.endswith(".ppm"))
    if not names:
        raise DataError(f"{args.images_dir}: no .ppm images")
    images = [read_ppm(os.path.join(args.images_dir, f)) for f in names]
    stage = args.stage if args.stage == "decoder" else int(args.stage)
    erf = compute_erf(model, stage, images)
    r50, r90 = save_erf(erf, args.out)
    print(f"stage: {erf.stage}")
    print(f"n_images: {erf.n_images}")
    print(f"r50: {r50:.3f}")
    print(f"r90: {r90:.3f}")
    print(f"map: {args.out}")
    return EXIT_OK


def _cmd_make_data(args) -> int:
    from .train import make_toy_dataset, save_dataset
    samples = make_toy_dataset(args.images, args.size, args.num_classes,
                               seed=args.seed)
    save_dataset(args.out, samples)
    print(f"images: {args.images}")
    print(f"size: {args.size}")
    print(f"num_classes: {args.num_classes}")
    print(f"dataset: {args.out}")
    return EXIT_OK


_COMMANDS = {
    "describe": _cmd_describe,
    "selftest": _cmd_selftest,
    "build": _cmd_build,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "erf": _cmd_erf,
    "make-data": _cmd_make_data,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads >= 1 and "numpy" not in sys.modules:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
    from .errors import (CheckpointError, ConfigError, DataError, NumericError,
                         ShapeError)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ShapeError, DataError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
