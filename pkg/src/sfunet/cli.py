"""Operator surface: train, evaluate, predict, gradient-check, synthesize
data, dump spectra, and run the MPCA/FSA ablation comparison.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (including failed gradient checks and NaN aborts). All randomness
flows from --seed; omitting it means seed 0, never entropy. Commands write
only beneath their --out argument.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data, fourier, metrics, network, plotting, training
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    SfunetError,
    TapeError,
)
from .network import ModelConfig, SFUNet
from .tensor import RealTensor4
from .training import TrainConfig

_SECTIONS = ("model", "train", "data")


def parse_config_file(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse the flat `key = value` config with [model]/[train]/[data] sections.

    Unknown sections or keys are rejected with the offending line number.
    """
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    model_cfg = ModelConfig()
    train_cfg = TrainConfig()
    section = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in _SECTIONS:
                    raise ConfigError(f"{path}:{lineno}: unknown section '[{section}]'")
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            if section is None:
                raise ConfigError(f"{path}:{lineno}: key appears before any section header")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                if section == "model":
                    network.set_config_field(model_cfg, key, value)
                elif section == "train":
                    if key in training.DATA_SECTION_KEYS:
                        raise ConfigError(f"key '{key}' belongs in the [data] section")
                    training.set_train_field(train_cfg, key, value)
                else:
                    if key not in training.DATA_SECTION_KEYS:
                        raise ConfigError(f"unknown data config key '{key}'")
                    training.set_train_field(train_cfg, key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def _load_splits(data_dir, model_cfg: ModelConfig, splits=("train", "val")):
    return [
        data.load_split(data_dir, name, model_cfg.input_channels, model_cfg.input_hw, model_cfg.n_classes)
        for name in splits
    ]


def _print_parameter_summary(model: SFUNet) -> None:
    summary = model.parameter_summary()
    parts = "  ".join(f"{k}={v}" for k, v in summary.items())
    print(f"parameters: {parts}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    model_cfg, train_cfg = parse_config_file(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    model = SFUNet(model_cfg, seed=train_cfg.seed)
    _print_parameter_summary(model)
    train_samples, val_samples = _load_splits(args.data, model_cfg)
    result = training.train_loop(model, train_samples, val_samples, train_cfg, out_dir=args.out)
    plotting.save_training_curves(result.epochs, os.path.join(args.out, "train_curves.png"))
    final = result.epochs[-1]
    print(f"finished epoch {final.epoch}: train_loss={final.train_loss:.6f} "
          f"val_dsc={final.val_dsc:.6f} val_iou={final.val_iou:.6f}")
    for path in result.best_paths:
        print(f"checkpoint: {path}")
    return 0


def cmd_eval(args) -> int:
    model, _ = network.load(args.ckpt)
    samples = data.load_split(
        args.data, args.split, model.config.input_channels, model.config.input_hw, model.config.n_classes
    )
    if not samples:
        raise DataError(f"split '{args.split}' is empty under '{args.data}'")
    report = metrics.evaluate(model, samples, model.config.n_classes)
    sys.stdout.write(report.to_tsv())
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.tsv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_kv())
    plotting.save_metric_bars(report, os.path.join(args.out, "report.png"))
    return 0


def cmd_predict(args) -> int:
    model, _ = network.load(args.ckpt)
    image = data.load_image(args.image, model.config.input_channels, model.config.input_hw)
    image = RealTensor4(image.data.astype(model.config.dtype), copy=False)
    mask = model.predict_classes(image)[0]
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    data.write_pgm(args.out, mask.astype(np.uint8))
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    names = training.GRADCHECK_BLOCKS if args.block == "all" else (args.block,)
    all_passed = True
    for name in names:
        report = training.gradcheck(name, tolerance=args.tolerance, seed=args.seed or 0)
        for line in report.format_lines():
            print(line)
        all_passed &= report.passed
    return 0 if all_passed else 4


def cmd_synth(args) -> int:
    h, w = network._parse_hw(args.size)
    manifest = data.synth_generate(
        args.out, args.count, args.classes, h, w, args.seed or 0, channels=args.channels
    )
    print(f"wrote {manifest}")
    return 0


def cmd_spectrum(args) -> int:
    model, _ = network.load(args.ckpt)
    if not model.fsa:
        raise ConfigError("checkpoint was built without FSA blocks; nothing to dump")
    if not 1 <= args.level <= len(model.fsa):
        raise ConfigError(f"level must lie in [1, {len(model.fsa)}], got {args.level}")
    block = model.fsa[args.level - 1]
    images = fourier.spectrum_images(block.masks, block.filter)
    os.makedirs(args.out, exist_ok=True)
    for name, img in images.items():
        data.write_pgm(os.path.join(args.out, f"level{args.level}_{name}.pgm"), img)
    plotting.save_spectrum_panel(images, os.path.join(args.out, f"level{args.level}_spectrum.png"))
    print(f"wrote {len(images)} grayscale dumps and a panel under {args.out}")
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = parse_config_file(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    train_samples, val_samples = _load_splits(args.data, model_cfg)
    rows = training.ablation_table(model_cfg, train_cfg, train_samples, val_samples)
    table = training.format_ablation_table(rows)
    sys.stdout.write(table)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ablation.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    plotting.save_ablation_chart(rows, os.path.join(args.out, "ablation.png"))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfunet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on a manifest dataset")
    p.add_argument("--config", required=True, help="config file with [model]/[train]/[data] sections")
    p.add_argument("--data", required=True, help="dataset directory containing manifest.tsv")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed (default 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=data.SPLITS)
    p.add_argument("--out", default=".", help="directory for report files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image into a class-index PGM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PGM path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--block", default="all",
                   choices=("all",) + training.GRADCHECK_BLOCKS)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", default="32x32", help="sample resolution, e.g. 32x32")
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spectrum", help="dump FSA masks and filter magnitudes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--level", type=int, required=True, help="FSA level, 1..4")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("ablate", help="train and compare MPCA/FSA on-off variants")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ShapeError, TapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except SfunetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
