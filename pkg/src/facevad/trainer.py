"""SGD with momentum on the combined squared + absolute error loss."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .dataset import SplitDataset, batch_iter
from .model import Model
from .tensor import ShapeError, Tensor, _make, backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, last_good: Model | None):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    a: float = 2.0
    lr0: float = 0.001
    momentum: float = 0.9
    max_epochs: int = 100
    lr_halve_every: int = 20
    batch_size: int = 32
    seed: int = 0
    flip: bool = True

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("loss weight a must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_halve_every < 1:
            raise ValueError("batch_size, max_epochs and lr_halve_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def loss(pred: Tensor, target, a: float = 2.0) -> Tensor:
    """Mean over all N*D entries of e**2 + a*|e|, with e = target - pred."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction shape {pred.shape} != target shape {target.shape}")
    e = target.data - pred.data
    count = e.size
    with np.errstate(over="ignore", invalid="ignore"):
        # overflow shows up as a non-finite loss, which train() reports
        value = np.asarray((e * e + a * np.abs(e)).sum() / count, dtype=pred.dtype)

    def bw(g):
        # d/dpred of (e^2 + a|e|) is -(2e + a*sign(e)); sign(0) = 0
        d = (2.0 * e + a * np.sign(e)) * (g / count)
        return -d.astype(pred.dtype), d.astype(target.dtype)

    return _make(value, (pred, target), bw, "l1l2_loss")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halve_every)


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | None],
    velocity: Mapping[str, np.ndarray],
    lr: float,
    momentum: float,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Heavy-ball update: v <- momentum*v - lr*g ; p <- p + v."""
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads.get(k)
        v = velocity.get(k)
        if v is None:
            v = np.zeros_like(p)
        if g is None:
            g = np.zeros_like(p)
        v = momentum * v - lr * g
        new_v[k] = v.astype(p.dtype, copy=False)
        new_p[k] = (p + v).astype(p.dtype, copy=False)
    return new_p, new_v


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_rmse: list[float]


@dataclass
class TrainResult:
    model: Model
    best: Model
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1


def train(model: Model, dataset: SplitDataset, cfg: TrainConfig) -> TrainResult:
    """Run ``cfg.max_epochs`` epochs; track the best-validation-RMSE model.

    ``model`` is updated in place. Validation uses flip-averaged predictions.
    """
    from .evaluator import predict_examples, rmse

    if not dataset.train:
        raise ValueError("training split is empty")
    if model.cfg.output_dims != dataset.dims:
        raise ValueError(f"model predicts {model.cfg.output_dims} dims but dataset targets have {dataset.dims}")
    rng = np.random.default_rng(cfg.seed)
    velocity: dict[str, np.ndarray] = {}
    history: list[EpochRecord] = []
    best, best_score, best_epoch = model.copy(), math.inf, -1
    last_good = model.copy()
    size, channels = model.cfg.input_size, model.cfg.input_channels
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        total, seen = 0.0, 0
        batches = batch_iter(
            dataset.train, cfg.batch_size, rng, shuffle=True, target_size=size, channels=channels, flip=cfg.flip
        )
        for b, (x, y) in enumerate(batches):
            model.zero_grad()
            out = loss(model.forward(x, training=True, rng=rng), y, cfg.a)
            value = float(out.data)
            if not math.isfinite(value):
                raise TrainingDiverged(epoch, b, last_good)
            backward(out)
            params = {k: p.data for k, p in model.params.items()}
            grads = {k: p.grad for k, p in model.params.items()}
            new_p, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum)
            for k, p in model.params.items():
                p.data = new_p[k]
            total += value * x.shape[0]
            seen += x.shape[0]
        train_loss = total / seen
        if dataset.val:
            preds, targets = predict_examples(model, dataset.val, flip_avg=True)
            val = [rmse(targets[:, d], preds[:, d]) for d in range(dataset.dims)]
            score = float(np.mean(val))
        else:
            val, score = [math.nan] * dataset.dims, math.nan
        history.append(EpochRecord(epoch, lr, train_loss, val))
        log.info("epoch %d lr %.6g loss %.6f val_rmse %s", epoch, lr, train_loss, val)
        last_good = model.copy()
        if not dataset.val or score < best_score:
            best, best_score, best_epoch = last_good, score, epoch
    model.metadata = {"epochs": cfg.max_epochs, "final_lr": history[-1].lr, "loss_history": [h.train_loss for h in history]}
    best.metadata = {"epoch": best_epoch, "val_rmse_mean": best_score if math.isfinite(best_score) else None}
    return TrainResult(model, best, history, best_epoch)


def history_header(dims: int) -> list[str]:
    return ["epoch", "lr", "train_loss", "val_rmse_v", "val_rmse_a", "val_rmse_d"][: 3 + dims]


def write_history(history: list[EpochRecord], path, dims: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(history_header(dims))
        for h in history:
            w.writerow([h.epoch, repr(h.lr), repr(h.train_loss), *(repr(float(v)) for v in h.val_rmse)])
