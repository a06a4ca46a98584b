"""Second-order (bilinear) pooling and the reduction-conv head built on it."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _make, conv2d, dropout, linear, signed_sqrt


@dataclass(frozen=True)
class BilinearHeadConfig:
    reduce_channels: int = 16
    dropout_rate: float = 0.3
    post_fc_dim: int = 64
    signed_sqrt: bool = False

    def __post_init__(self):
        if self.reduce_channels < 1 or self.post_fc_dim < 1:
            raise ValueError("reduce_channels and post_fc_dim must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def feature_dim(self) -> int:
        return self.reduce_channels**2


def bilinear_pool(x: Tensor) -> Tensor:
    """Average of f f^T over spatial locations, flattened to (N, C*C)."""
    n, c, h, w = x.shape
    hw = h * w
    f = x.data.reshape(n, c, hw)
    out = np.matmul(f, f.transpose(0, 2, 1)) / x.dtype.type(hw)

    def bw(g):
        gm = g.reshape(n, c, c)
        gsym = gm + gm.transpose(0, 2, 1)
        return ((np.matmul(gsym, f) / x.dtype.type(hw)).reshape(x.shape),)

    return _make(out.reshape(n, c * c), (x,), bw, "bilinear_pool")


def bilinear_head(
    x: Tensor,
    cfg: BilinearHeadConfig,
    params: dict[str, Tensor],
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """1x1 reduction conv, optional signed sqrt, bilinear pool, dropout, fc.

    ``params`` holds ``reduce.weight``, ``reduce.bias``, ``fc.weight`` and
    ``fc.bias``.
    """
    rw = params["reduce.weight"]
    fw = params["fc.weight"]
    if rw.shape != (cfg.reduce_channels, x.shape[1], 1, 1):
        raise ShapeError(
            f"reduce.weight shape {rw.shape} does not match "
            f"({cfg.reduce_channels}, {x.shape[1]}, 1, 1)"
        )
    if fw.shape != (cfg.post_fc_dim, cfg.feature_dim):
        raise ShapeError(f"fc.weight shape {fw.shape} does not match ({cfg.post_fc_dim}, {cfg.feature_dim})")
    z = conv2d(x, rw, params.get("reduce.bias"))
    if cfg.signed_sqrt:
        z = signed_sqrt(z)
    z = bilinear_pool(z)
    z = dropout(z, cfg.dropout_rate, rng, training)
    return linear(z, fw, params.get("fc.bias"))
