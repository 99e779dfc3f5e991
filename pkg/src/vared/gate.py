"""Soft modulation gate: per-layer policy vectors from pooled input features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor, default_dtype

DEFAULT_HIDDEN = 16


@dataclass
class PolicyVector:
    values: np.ndarray
    kind: str  # "temporal" | "channel"

    def factor(self, i: int) -> float:
        """Scaling factor of 1-based branch i: R = 2^(i-1) or r = (1/2)^(i-1)."""
        return 2.0 ** (i - 1) if self.kind == "temporal" else 0.5 ** (i - 1)


def largest_active_index(v, eps: float = 0.0) -> int:
    """Smallest 1-based index whose weight exceeds ``eps``; 1 when nothing does."""
    v = np.asarray(getattr(v, "values", v)).reshape(-1)
    hits = np.flatnonzero(v > eps)
    return int(hits[0]) + 1 if hits.size else 1


def active_branch_set(v, eps: float = 0.0) -> list[tuple[int, float]]:
    """All (index, weight) pairs above ``eps``; falls back to [(1, 1.0)]."""
    v = np.asarray(getattr(v, "values", v)).reshape(-1)
    out = [(int(i) + 1, float(v[i])) for i in np.flatnonzero(v > eps)]
    return out or [(1, 1.0)]


class SoftGate:
    """phi(FC2(tanh(BN(FC1(pool(x))))) + beta), split into (V_t, V_c).

    ``w1`` is stored as [C_in*T, D_h] and ``w2`` as [D_h, S_t + S_c]. The bias
    starts at +1 on the full-compute entry of each half and 0 elsewhere; ``w2``
    starts tiny so early training behaves like the full network.
    """

    def __init__(self, c_in: int, t_in: int, s_t: int = 2, s_c: int = 2, hidden: int = DEFAULT_HIDDEN,
                 rng: np.random.Generator | None = None, w2_std: float = 1e-3):
        if min(s_t, s_c, hidden) < 1:
            raise ValueError(f"S_t, S_c and D_h must be >= 1 (got {s_t}, {s_c}, {hidden})")
        rng = rng or np.random.default_rng(0)
        dt = default_dtype()
        width = c_in * t_in
        self.c_in, self.t_in, self.s_t, self.s_c, self.hidden = c_in, t_in, s_t, s_c, hidden
        self.w1 = Tensor(rng.normal(0.0, np.sqrt(1.0 / width), (width, hidden)), requires_grad=True)
        self.bn_gamma = Tensor(np.ones(hidden), requires_grad=True)
        self.bn_beta = Tensor(np.zeros(hidden), requires_grad=True)
        self.bn_stats = ops.RunningStats(hidden, dtype=dt)
        self.w2 = Tensor(rng.normal(0.0, w2_std, (hidden, s_t + s_c)), requires_grad=True)
        beta = np.zeros(s_t + s_c)
        beta[0] = beta[s_t] = 1.0
        self.beta = Tensor(beta, requires_grad=True)

    @property
    def in_width(self) -> int:
        return self.c_in * self.t_in

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta,
                "w2": self.w2, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn_mean": self.bn_stats.mean, "bn_var": self.bn_stats.var}

    def forward(self, x: Tensor, mode: str = "train") -> tuple[Tensor, Tensor]:
        pooled = ops.global_spatial_pool(x)
        if pooled.shape[1] != self.in_width:
            raise ShapeError(f"gate expects C_in*T={self.in_width} features, got {pooled.shape[1]} "
                             f"(input {x.shape})")
        h = ops.fully_connected(pooled, self.w1)
        h = ops.tanh(ops.batch_norm(h, self.bn_gamma, self.bn_beta, self.bn_stats, mode))
        v = ops.phi_clamp(ops.fully_connected(h, self.w2, self.beta))
        return v[:, :self.s_t], v[:, self.s_t:]

    __call__ = forward

    def flops(self) -> int:
        return self.in_width * self.hidden + self.hidden * (self.s_t + self.s_c)
