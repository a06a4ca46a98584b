"""Command-line entry point: ``facevad <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 input or usage error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    DataFormatError,
    FaceImage,
    load_data_dir,
    parse_crowd_labels,
    parse_image_csv,
    parse_pixels,
    preprocess,
    build_dataset,
    write_synthetic,
)
from .evaluator import (
    DIM_NAMES,
    evaluate,
    feature_map,
    parse_grid,
    predict_examples,
    predict_flip_avg,
    rank_examples,
    threshold_sweep,
    write_pgm,
    write_rankings,
    write_sweep,
)
from .model import CheckpointError, ConfigError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .trainer import TrainConfig, TrainingDiverged, train, write_history
from .vad import NormsFormatError, derive_thresholds, load_norms, rating_histogram

NORMS_ENV = "FACEVAD_NORMS"
log = logging.getLogger("facevad")


class UsageError(Exception):
    """Bad input; maps to exit code 2."""


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__

    def add_input(self, path) -> None:
        self.inputs[str(path)] = hashlib.sha256(Path(path).read_bytes()).hexdigest()

    def write(self, out_dir: Path) -> None:
        doc = {
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "version": self.version,
            "created": datetime.now(timezone.utc).isoformat(),
        }
        (out_dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _resolve_norms(flag: str | None, data_dir: str | None = None) -> Path:
    if flag:
        path = Path(flag)
    elif os.environ.get(NORMS_ENV):
        path = Path(os.environ[NORMS_ENV])
    elif data_dir is not None:
        path = Path(data_dir) / "norms.csv"
    else:
        raise UsageError(f"no norms file given; pass --norms or set {NORMS_ENV}")
    if not path.is_file():
        raise UsageError(f"norms file not found: {path}")
    return path


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- subcommands


def cmd_map_labels(args) -> None:
    images_path, labels_path = _require_file(args.images), _require_file(args.labels)
    norms_path = _resolve_norms(args.norms)
    norms = load_norms(norms_path)
    ds = build_dataset(parse_image_csv(images_path), parse_crowd_labels(labels_path), norms, args.dims)
    out = _out_dir(args.out)
    examples = sorted(ds.all(), key=lambda e: e.id)
    names = DIM_NAMES[: args.dims]
    with open(out / "targets.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", *names])
        for ex in examples:
            w.writerow([ex.id, *(repr(float(v)) for v in ex.target.as_array())])
    hist = rating_histogram([e.target for e in examples], args.bins)
    edges = np.linspace(1.0, 9.0, args.bins + 1)
    with open(out / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", *names])
        for b in range(args.bins):
            counts = [int(hist[d, b]) if hist.size else 0 for d in range(args.dims)]
            w.writerow([repr(float(edges[b])), repr(float(edges[b + 1])), *counts])
    m = RunManifest("map-labels", {"dims": args.dims, "bins": args.bins})
    for p in (images_path, labels_path, norms_path):
        m.add_input(p)
    m.outputs = ["targets.csv", "histogram.csv"]
    m.write(out)
    log.info("mapped %d images (%d unratable, %d unlabeled dropped)", ds.retained, ds.dropped_unratable,
             ds.dropped_unlabeled)


def load_run_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = _require_file(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    try:
        return ModelConfig.from_dict(doc.get("model", {})), TrainConfig(**doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config)
    data_dir = Path(args.data_dir)
    norms_path = _resolve_norms(args.norms, args.data_dir)
    norms = load_norms(norms_path)
    for name in ("images.csv", "labels.csv"):
        _require_file(data_dir / name)
    ds = load_data_dir(data_dir, norms, model_cfg.output_dims)
    out = _out_dir(args.out_dir)
    manifest = RunManifest(
        "train", {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}, seed=train_cfg.seed
    )
    for p in (args.config, data_dir / "images.csv", data_dir / "labels.csv", norms_path):
        manifest.add_input(p)
    model = build_model(model_cfg)
    try:
        result = train(model, ds, train_cfg)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "last_good.ckpt")
            manifest.outputs = ["last_good.ckpt"]
        manifest.write(out)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    save_checkpoint(result.model, out / "final.ckpt")
    save_checkpoint(result.best, out / "best.ckpt")
    write_history(result.history, out / "history.csv", ds.dims)
    manifest.outputs = ["final.ckpt", "best.ckpt", "history.csv"]
    manifest.write(out)
    return 0


def cmd_eval(args) -> None:
    ckpt = _require_file(args.checkpoint)
    model = load_checkpoint(ckpt)
    data_dir = Path(args.data_dir)
    norms_path = _resolve_norms(args.norms, args.data_dir)
    norms = load_norms(norms_path)
    ds = load_data_dir(data_dir, norms, model.cfg.output_dims)
    examples = ds.split(args.split)
    if not examples:
        raise UsageError(f"split {args.split!r} is empty")
    preds, targets = predict_examples(model, examples, flip_avg=args.flip_avg)
    thr = derive_thresholds(norms)
    thresholds = sorted({0.5, 1.0, 2.0, round(thr["t_unit"], 6), round(thr["sd_mean"], 6)})
    report = evaluate(preds, targets, thresholds, mode=args.ave_mode, model_id=str(ckpt))
    grid = parse_grid(args.sweep)
    sweep = threshold_sweep(preds, targets, grid, args.reference, args.ave_mode)
    report.extra.update(
        {
            "split": args.split,
            "flip_avg": args.flip_avg,
            "t_unit": repr(thr["t_unit"]),
            "sd_mean": repr(thr["sd_mean"]),
            "reference_accuracy": repr(args.reference),
            "smallest_threshold": "not-achieved" if sweep.smallest_threshold is None
            else repr(sweep.smallest_threshold),
        }
    )
    out = _out_dir(args.out_dir)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    report.write_csv(out / "report.csv")
    write_sweep(sweep, out / "sweep.csv")
    k = min(args.rank_k, len(examples))
    best, worst = rank_examples([e.id for e in examples], preds, targets, k)
    write_rankings(best, worst, out / "ranking.csv", model.cfg.output_dims)
    m = RunManifest("eval", {"split": args.split, "sweep": args.sweep, "flip_avg": args.flip_avg,
                             "rank_k": args.rank_k, "ave_mode": args.ave_mode, "reference": args.reference})
    for p in (ckpt, data_dir / "images.csv", data_dir / "labels.csv", norms_path):
        m.add_input(p)
    m.outputs = ["report.txt", "report.csv", "sweep.csv", "ranking.csv"]
    m.write(out)


def cmd_featmap(args) -> None:
    model = load_checkpoint(_require_file(args.checkpoint))
    images_path = _require_file(args.images or Path(args.data_dir or ".") / "images.csv")
    images = {im.id: im for im in parse_image_csv(images_path)}
    if args.image_id not in images:
        raise UsageError(f"image {args.image_id!r} not found in {images_path}")
    x = preprocess(images[args.image_id], model.cfg.input_size, model.cfg.input_channels)
    try:
        fmap = feature_map(model, x, args.layer, args.mode)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(fmap, out)


def read_frames(path) -> list[FaceImage]:
    """Frames CSV: one 48x48 frame per row in a ``pixels`` column, in time order."""
    frames = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "pixels" not in [f.strip() for f in reader.fieldnames]:
            raise DataFormatError(f"{path}: frames CSV needs a 'pixels' column")
        for i, row in enumerate(reader):
            pixels = parse_pixels(row["pixels"], f"{path}: frame {i}")
            frames.append(FaceImage(f"frame{i}", pixels, "PrivateTest"))
    return frames


def trajectory_svg(points: np.ndarray, size: int = 400, pad: int = 30) -> str:
    """VA-plane scatter on the 1-9 square with the frame path as line segments."""
    span = size - 2 * pad

    def xy(v, a):
        return pad + (v - 1.0) / 8.0 * span, pad + (9.0 - a) / 8.0 * span

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#888"/>',
        f'<text x="{size / 2}" y="{size - 5}" text-anchor="middle" font-size="12">valence</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">arousal</text>',
    ]
    coords = [xy(float(p[0]), float(p[1])) for p in points]
    for (x0, y0), (x1, y1) in zip(coords, coords[1:]):
        parts.append(f'<line x1="{x0:.3f}" y1="{y0:.3f}" x2="{x1:.3f}" y2="{y1:.3f}" stroke="#36c"/>')
    for i, (x, y) in enumerate(coords):
        parts.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="3" fill="#c33"><title>frame {i}</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_trajectory(args) -> None:
    model = load_checkpoint(_require_file(args.checkpoint))
    frames = read_frames(_require_file(args.frames_csv))
    if not frames:
        raise UsageError(f"{args.frames_csv}: no frames")
    x = Tensor(np.stack([preprocess(f, model.cfg.input_size, model.cfg.input_channels).data for f in frames]))
    preds = np.concatenate([predict_flip_avg(model, Tensor(x.data[i : i + 64])) for i in range(0, len(frames), 64)])
    names = DIM_NAMES[: model.cfg.output_dims]
    out_csv = Path(args.out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", *names])
        for i, p in enumerate(preds):
            w.writerow([i, *(repr(float(v)) for v in p)])
    if args.out_svg:
        Path(args.out_svg).write_text(trajectory_svg(preds), encoding="utf-8")


def cmd_synth(args) -> None:
    try:
        split = tuple(float(v) for v in args.split.split(","))
    except ValueError:
        raise UsageError(f"--split must be three comma-separated fractions, got {args.split!r}") from None
    if len(split) != 3 or any(v < 0 for v in split) or abs(sum(split) - 1.0) > 1e-9:
        raise UsageError("--split must be three non-negative fractions summing to 1")
    out = write_synthetic(args.out_dir, args.n, args.seed, split, args.unratable_frac)
    m = RunManifest("synth", {"n": args.n, "split": list(split), "unratable_frac": args.unratable_frac},
                    seed=args.seed)
    m.outputs = ["images.csv", "labels.csv", "norms.csv"]
    m.write(out)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facevad", description="Dimensional emotion regression for face images.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("map-labels", help="map crowd votes to V/A(/D) targets")
    s.add_argument("--images", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--norms", help=f"norms CSV (default: ${NORMS_ENV})")
    s.add_argument("--dims", type=int, choices=(2, 3), default=3)
    s.add_argument("--bins", type=int, default=32)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_map_labels)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--data-dir", required=True, help="directory with images.csv, labels.csv[, norms.csv]")
    s.add_argument("--config", required=True, help='JSON with "model" and "train" sections')
    s.add_argument("--norms")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir", required=True)
    s.add_argument("--norms")
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--sweep", default="0:2:101", help="threshold grid start:stop:count")
    s.add_argument("--flip-avg", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--rank-k", type=int, default=10)
    s.add_argument("--ave-mode", choices=("abs", "rms"), default="abs",
                   help="per-image error: mean |error| over dims, or root mean square")
    s.add_argument("--reference", type=float, default=0.7116, help="accuracy whose smallest threshold is reported")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("featmap", help="export a channel-collapsed feature map as PGM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--images", help="image CSV (default: DATA_DIR/images.csv)")
    s.add_argument("--data-dir")
    s.add_argument("--image-id", required=True)
    s.add_argument("--layer", required=True)
    s.add_argument("--mode", choices=("avg", "max"), default="avg")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featmap)

    s = sub.add_parser("trajectory", help="per-frame V/A(/D) predictions for a frame sequence")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames-csv", required=True)
    s.add_argument("--out-csv", required=True)
    s.add_argument("--out-svg")
    s.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("synth", help="write a synthetic image/vote/norms dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")
    s.add_argument("--unratable-frac", type=float, default=0.0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)
    return p


INPUT_ERRORS = (UsageError, DataFormatError, NormsFormatError, ConfigError, CheckpointError, FileNotFoundError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        rc = args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
