"""Regression metrics, threshold accuracy, rankings and feature-map export."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import LabeledExample, mirror, preprocess
from .model import Model
from .tensor import Tensor

DIM_NAMES = ("valence", "arousal", "dominance")
DEFAULT_REFERENCE_ACCURACY = 0.7116


class UndefinedCorrelation(ValueError):
    pass


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"need equal-length non-empty 1-d sequences, got {y.shape} and {yhat.shape}")
    return y, yhat


def rmse(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def pearson(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    sy = math.sqrt(float(dy @ dy))
    sp = math.sqrt(float(dp @ dp))
    if sy == 0.0 or sp == 0.0:
        raise UndefinedCorrelation("correlation is undefined for a constant sequence")
    r = float(dy @ dp) / (sy * sp)
    return max(-1.0, min(1.0, r))


def per_image_error(preds, targets, mode: str = "abs") -> np.ndarray:
    """Per-image error averaged over dimensions.

    ``abs``: mean over dimensions of |error| (a one-sample RMSE per dimension).
    ``rms``: square root of the mean squared error over dimensions.
    """
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2:
        raise ValueError(f"predictions {p.shape} and targets {t.shape} must be equal (N, D) arrays")
    e = t - p
    if mode == "abs":
        return np.abs(e).mean(axis=1)
    if mode == "rms":
        return np.sqrt((e**2).mean(axis=1))
    raise ValueError(f"mode must be 'abs' or 'rms', got {mode!r}")


def accuracy(preds, targets, threshold: float, mode: str = "abs") -> float:
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    err = per_image_error(preds, targets, mode)
    return float(np.count_nonzero(err < threshold)) / err.size


def parse_grid(spec: str) -> np.ndarray:
    """``start:stop:count`` -> inclusive uniform grid."""
    try:
        start, stop, count = spec.split(":")
        grid = np.linspace(float(start), float(stop), int(count))
    except ValueError:
        raise ValueError(f"grid spec must look like 0:2:101, got {spec!r}") from None
    if grid.size < 1:
        raise ValueError("grid needs at least one point")
    return grid


@dataclass
class SweepResult:
    thresholds: np.ndarray
    accuracy: np.ndarray
    reference: float
    smallest_threshold: float | None

    @property
    def achieved(self) -> bool:
        return self.smallest_threshold is not None


def threshold_sweep(
    preds,
    targets,
    grid: Sequence[float] | None = None,
    reference: float = DEFAULT_REFERENCE_ACCURACY,
    mode: str = "abs",
) -> SweepResult:
    grid = np.linspace(0.0, 2.0, 101) if grid is None else np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("threshold grid must be sorted ascending")
    err = np.sort(per_image_error(preds, targets, mode))
    # count of errors strictly below each threshold
    counts = np.searchsorted(err, grid, side="left")
    acc = counts / err.size
    hit = np.nonzero(acc >= reference)[0]
    smallest = float(grid[hit[0]]) if hit.size else None
    return SweepResult(grid, acc, reference, smallest)


def write_sweep(sweep: SweepResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "accuracy"])
        for t, a in zip(sweep.thresholds, sweep.accuracy):
            w.writerow([repr(float(t)), repr(float(a))])


# ---------------------------------------------------------------- prediction


def predict_flip_avg(model: Model, x) -> np.ndarray:
    """(forward(x) + forward(mirror(x))) / 2 for a batch."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    a = model.forward(x).data
    b = model.forward(mirror(x)).data
    return (a + b) / a.dtype.type(2)


def predict_examples(
    model: Model,
    examples: Sequence[LabeledExample],
    flip_avg: bool = True,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    size, channels = model.cfg.input_size, model.cfg.input_channels
    preds = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        x = Tensor(np.stack([preprocess(ex.image, size, channels).data for ex in chunk]))
        preds.append(predict_flip_avg(model, x) if flip_avg else model.forward(x).data)
    targets = np.array([ex.target.as_array() for ex in examples], dtype=np.float64)
    if not preds:
        return np.zeros((0, model.cfg.output_dims)), targets
    return np.concatenate(preds).astype(np.float64), targets


# ---------------------------------------------------------------- ranking


@dataclass
class RankedExample:
    rank: int
    image_id: str
    rmse: float
    pred: np.ndarray
    target: np.ndarray


def rank_examples(ids: Sequence[str], preds, targets, k: int) -> tuple[list[RankedExample], list[RankedExample]]:
    """Top-k best and worst images by per-image RMSE; ties go to the smaller id."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if not 0 <= k <= len(ids):
        raise ValueError(f"k must be between 0 and {len(ids)}")
    err = per_image_error(p, t, mode="rms")
    best = sorted(range(len(ids)), key=lambda i: (err[i], ids[i]))[:k]
    worst = sorted(range(len(ids)), key=lambda i: (-err[i], ids[i]))[:k]

    def wrap(order):
        return [RankedExample(r, ids[i], float(err[i]), p[i], t[i]) for r, i in enumerate(order, start=1)]

    return wrap(best), wrap(worst)


def write_rankings(best: list[RankedExample], worst: list[RankedExample], path, dims: int) -> None:
    names = DIM_NAMES[:dims]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "image_id", "rmse", *(f"{n}_pred" for n in names), *(f"{n}_true" for n in names), "group"])
        for group, rows in (("best", best), ("worst", worst)):
            for r in rows:
                w.writerow(
                    [r.rank, r.image_id, repr(r.rmse), *(repr(float(v)) for v in r.pred),
                     *(repr(float(v)) for v in r.target), group]
                )


# ---------------------------------------------------------------- feature maps


def collapse_channels(fmap: np.ndarray, mode: str = "avg") -> np.ndarray:
    """(C, H, W) -> (H, W) by channel mean or max."""
    if mode == "avg":
        return fmap.mean(axis=0)
    if mode == "max":
        return fmap.max(axis=0)
    raise ValueError(f"mode must be 'avg' or 'max', got {mode!r}")


def to_gray8(m: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes mid-gray 128."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)


def feature_map(model: Model, image: Tensor, layer: str, mode: str = "avg") -> np.ndarray:
    names = model.layer_names()
    if layer not in names:
        raise KeyError(f"unknown layer {layer!r}; valid layers: {', '.join(names)}")
    x = image if image.data.ndim == 4 else Tensor(image.data[None])
    taps: dict[str, np.ndarray] = {}
    model.forward(x, taps=taps)
    return to_gray8(collapse_channels(taps[layer][0], mode))


def write_pgm(img: np.ndarray, path) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    n: int
    dims: int
    rmse: list[float]
    mae: list[float]
    corr: list[float | None]
    thresholds: list[float]
    accuracy: list[float]
    accuracy_mode: str = "abs"
    model_id: str = ""
    extra: dict = field(default_factory=dict)

    def items(self) -> list[tuple[str, str]]:
        out = [("model", self.model_id), ("n", str(self.n)), ("dims", str(self.dims)),
               ("accuracy_mode", self.accuracy_mode)]
        for d, name in enumerate(DIM_NAMES[: self.dims]):
            corr = self.corr[d]
            out += [(f"{name}_rmse", repr(self.rmse[d])), (f"{name}_mae", repr(self.mae[d])),
                    (f"{name}_corr", "undefined" if corr is None else repr(corr))]
        for t, a in zip(self.thresholds, self.accuracy):
            out.append((f"accuracy@{t:g}", repr(a)))
        out += [(k, str(v)) for k, v in sorted(self.extra.items())]
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.items())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dimension", "rmse", "mae", "corr"])
            for d, name in enumerate(DIM_NAMES[: self.dims]):
                corr = self.corr[d]
                w.writerow([name, repr(self.rmse[d]), repr(self.mae[d]), "undefined" if corr is None else repr(corr)])


def evaluate(
    preds,
    targets,
    thresholds: Sequence[float] = (0.5, 1.0, 2.0),
    mode: str = "abs",
    model_id: str = "",
) -> EvalReport:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    dims = p.shape[1]
    corr: list[float | None] = []
    for d in range(dims):
        try:
            corr.append(pearson(t[:, d], p[:, d]))
        except UndefinedCorrelation:
            corr.append(None)
    return EvalReport(
        n=len(p),
        dims=dims,
        rmse=[rmse(t[:, d], p[:, d]) for d in range(dims)],
        mae=[mae(t[:, d], p[:, d]) for d in range(dims)],
        corr=corr,
        thresholds=list(thresholds),
        accuracy=[accuracy(p, t, th, mode) for th in thresholds],
        accuracy_mode=mode,
        model_id=model_id,
    )


class RunningMetrics:
    """Mergeable sums for computing rmse/mae/pearson over shards of one dimension."""

    def __init__(self):
        self.n = 0
        self.sse = 0.0
        self.sae = 0.0
        self.mean_y = 0.0
        self.mean_p = 0.0
        self.m2_y = 0.0
        self.m2_p = 0.0
        self.c_yp = 0.0

    @classmethod
    def of(cls, y, yhat) -> RunningMetrics:
        y, yhat = _pair(y, yhat)
        r = cls()
        r.n = y.size
        e = y - yhat
        r.sse = float(e @ e)
        r.sae = float(np.abs(e).sum())
        r.mean_y, r.mean_p = float(y.mean()), float(yhat.mean())
        dy, dp = y - r.mean_y, yhat - r.mean_p
        r.m2_y, r.m2_p, r.c_yp = float(dy @ dy), float(dp @ dp), float(dy @ dp)
        return r

    def merge(self, other: RunningMetrics) -> RunningMetrics:
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        r = RunningMetrics()
        n = self.n + other.n
        dy = other.mean_y - self.mean_y
        dp = other.mean_p - self.mean_p
        w = self.n * other.n / n
        r.n = n
        r.sse = self.sse + other.sse
        r.sae = self.sae + other.sae
        r.mean_y = self.mean_y + dy * other.n / n
        r.mean_p = self.mean_p + dp * other.n / n
        r.m2_y = self.m2_y + other.m2_y + dy * dy * w
        r.m2_p = self.m2_p + other.m2_p + dp * dp * w
        r.c_yp = self.c_yp + other.c_yp + dy * dp * w
        return r

    def rmse(self) -> float:
        return math.sqrt(self.sse / self.n)

    def mae(self) -> float:
        return self.sae / self.n

    def pearson(self) -> float:
        if self.m2_y == 0.0 or self.m2_p == 0.0:
            raise UndefinedCorrelation("correlation is undefined for a constant sequence")
        return max(-1.0, min(1.0, self.c_yp / math.sqrt(self.m2_y * self.m2_p)))
