"""SGD with Nesterov momentum and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .tensor import Tensor


def cosine_lr(epoch: float, total_epochs: int, lr_max: float, lr_min: float = 0.0,
              warmup_epochs: int = 0) -> float:
    """Cosine decay from ``lr_max`` at epoch 0 to ``lr_min`` at ``total_epochs``.

    With ``warmup_epochs`` > 0 the first epochs ramp linearly up to ``lr_max``.
    """
    if total_epochs <= 0:
        return lr_max
    if warmup_epochs and epoch < warmup_epochs:
        return lr_max * (epoch + 1) / (warmup_epochs + 1)
    frac = min(max(epoch / total_epochs, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * frac))


class SGD:
    """Nesterov-momentum SGD updating parameter arrays in place.

    Matches the common formulation: ``g += wd * p``, ``buf = mu * buf + g``,
    ``p -= lr * (g + mu * buf)``.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, nesterov: bool = True):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.buffers: dict[int, np.ndarray] = {}

    def step(self, grads: Mapping[Tensor, np.ndarray], no_decay: set[int] = frozenset()) -> None:
        for p in self.params:
            g = grads.get(p)
            if g is None:
                continue
            sgd_step(p, g, self.lr, self.momentum,
                     0.0 if id(p) in no_decay else self.weight_decay,
                     self.buffers, self.nesterov)


def sgd_step(param: Tensor, grad: np.ndarray, lr: float, momentum: float, weight_decay: float,
             buffers: dict[int, np.ndarray] | None = None, nesterov: bool = True) -> None:
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    g = grad.astype(param.dtype, copy=True)
    if weight_decay:
        g += weight_decay * param.data
    if momentum:
        if buffers is None:
            raise ValueError("momentum requires a buffer dict")
        buf = buffers.get(id(param))
        if buf is None:
            buf = g.copy()
        else:
            buf *= momentum
            buf += g
        buffers[id(param)] = buf
        g = g + momentum * buf if nesterov else buf
    param.data -= lr * g
