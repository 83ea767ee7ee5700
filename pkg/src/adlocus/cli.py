"""Command-line entry point: ``adlocus {synth,train,predict,eval,sweep,roc}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .data import SynthConfig, generate_synthetic, load_image, load_manifest, write_manifest
from .errors import AdlocusError, ConfigError
from .model import ModelConfig, build_model, forward, load_weights, save_weights
from .trainer import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _unit(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in [0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="adlocus", description="Billboard segmentation: train, predict and evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic billboard dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--holdout", type=int, default=0,
                   help="also write train.csv/test.csv with the last N pairs held out")
    p.add_argument("--config", type=Path)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--val-manifest", type=Path)
    p.add_argument("--weights", type=Path, help="start from these weights instead of a fresh init")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--config", type=Path)

    p = sub.add_parser("predict", help="probability map and binary mask for one image")
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=_unit, default=metrics.DEFAULT_THRESHOLD)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("eval", help="per-image PA/MA/mIOU/fwIOU and their means")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=_unit, default=metrics.DEFAULT_THRESHOLD)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("sweep", help="accuracy/FPR/TPR over thresholds 0, 0.05, ..., 1")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("roc", help="ROC points (fpr, tpr) from a sweep CSV or a model")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--sweep", type=Path, help="sweep.csv written by the sweep command")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--weights", type=Path)
    p.add_argument("--config", type=Path)
    parser.set_defaults(roc_parser=p)
    return parser


def _load_config_file(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict) or set(data) - {"model", "train", "synth"}:
        raise ConfigError("config must be a JSON object with optional 'model', 'train', 'synth' sections")
    return data


def _apply(cls, section: dict | None, **overrides):
    known = {f.name for f in fields(cls)}
    section = dict(section or {})
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for key in ("input_size", "encoder_channels", "decoder_channels", "image_size",
                "rect_count_range", "rect_area_fraction"):
        if key in section:
            section[key] = tuple(section[key])
    try:
        cfg = cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} section: {exc}") from exc
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _echo_config(command: str, **parts) -> None:
    resolved = {"command": command}
    for name, value in parts.items():
        resolved[name] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
    print("config: " + json.dumps(resolved, sort_keys=True, default=str))


def _model_params(weights: Path, cfg: dict):
    model_cfg = _apply(ModelConfig, cfg["model"]) if "model" in cfg else None
    return load_weights(weights, model_cfg)


def cmd_synth(args, cfg) -> None:
    synth = _apply(SynthConfig, cfg.get("synth"), count=args.count, seed=args.seed)
    _echo_config("synth", synth=synth, out=args.out, holdout=args.holdout)
    if not 0 <= args.holdout < synth.count:
        raise ConfigError(f"--holdout must be in [0, count), got {args.holdout}")
    manifest = generate_synthetic(synth, args.out)
    if args.holdout:
        cut = len(manifest) - args.holdout
        write_manifest(manifest.subset(0, cut), args.out / "train.csv")
        write_manifest(manifest.subset(cut), args.out / "test.csv")
    print(f"wrote {len(manifest)} pairs to {args.out}")


def cmd_train(args, cfg) -> None:
    train_cfg = _apply(
        TrainConfig, cfg.get("train"), learning_rate=args.lr, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed, checkpoint_every=args.checkpoint_every,
        optimizer=args.optimizer,
    )
    model_cfg = _apply(ModelConfig, cfg.get("model"), seed=args.seed)
    _echo_config("train", model=model_cfg, train=train_cfg, manifest=args.manifest,
                 val_manifest=args.val_manifest, weights=args.weights, out=args.out)
    manifest = load_manifest(args.manifest, "train")
    val = load_manifest(args.val_manifest, "val") if args.val_manifest else None
    params = load_weights(args.weights, model_cfg) if args.weights else build_model(model_cfg)
    params, report = train(params, manifest, train_cfg, val_dataset=val, checkpoint_dir=args.out)
    save_weights(params, args.out / "model.adlw")
    report.write_csv(args.out / "train_report.csv")
    print(f"final train loss {report.train_loss[-1]:.6f}; weights {args.out / 'model.adlw'}")


def write_probability_png(prob: np.ndarray, path: Path) -> None:
    """16-bit grayscale PNG with value round(p * 65535)."""
    q = np.round(np.clip(prob, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_probability_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 65535.0


def cmd_predict(args, cfg) -> None:
    _echo_config("predict", image=args.image, weights=args.weights, out=args.out, threshold=args.threshold)
    params = _model_params(args.weights, cfg)
    image, _ = load_image(args.image, params.config.input_size)
    prob = forward(params, image)[0]
    args.out.mkdir(parents=True, exist_ok=True)
    stem = args.image.stem
    write_probability_png(prob, args.out / f"{stem}_prob.png")
    mask = metrics.binarize(prob, args.threshold) * 255
    Image.fromarray(mask.astype(np.uint8), "L").save(args.out / f"{stem}_mask.png")
    print(f"wrote {stem}_prob.png and {stem}_mask.png to {args.out}")


def cmd_eval(args, cfg) -> None:
    _echo_config("eval", manifest=args.manifest, weights=args.weights, out=args.out, threshold=args.threshold)
    params = _model_params(args.weights, cfg)
    manifest = load_manifest(args.manifest, "eval")
    report = metrics.evaluate_dataset(params, manifest, args.threshold)
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_csv(args.out / "metrics.csv")
    print(f"PA {report.pa:.6f}  MA {report.ma:.6f}  mIOU {report.miou:.6f}  fwIOU {report.fwiou:.6f}"
          f"  ({len(report.per_image)} images)")


def cmd_sweep(args, cfg) -> None:
    _echo_config("sweep", manifest=args.manifest, weights=args.weights, out=args.out)
    params = _model_params(args.weights, cfg)
    manifest = load_manifest(args.manifest, "eval")
    acc, ids = metrics.sweep_dataset(params, manifest)
    points = acc.points()
    args.out.mkdir(parents=True, exist_ok=True)
    metrics.write_sweep_csv(points, args.out / "sweep.csv")
    metrics.write_accuracy_distribution_csv(acc, ids, args.out / "accuracy_per_image.csv")
    print(f"best threshold {metrics.best_threshold(points):.2f}")


def cmd_roc(args, cfg) -> None:
    _echo_config("roc", sweep=args.sweep, manifest=args.manifest, weights=args.weights, out=args.out)
    if args.sweep is not None:
        points = metrics.read_sweep_csv(args.sweep)
    elif args.manifest is not None and args.weights is not None:
        params = _model_params(args.weights, cfg)
        acc, _ = metrics.sweep_dataset(params, load_manifest(args.manifest, "eval"))
        points = acc.points()
    else:
        args.roc_parser.error("roc needs --sweep, or both --manifest and --weights")
    args.out.mkdir(parents=True, exist_ok=True)
    metrics.write_roc_csv(points, args.out / "roc.csv")
    print(f"wrote {len(points)} ROC points to {args.out / 'roc.csv'}")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "roc": cmd_roc,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config_file(args.config)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (AdlocusError, OSError) as exc:
        print(f"adlocus: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
