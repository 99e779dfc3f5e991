"""Analytic FLOPs accounting and the efficiency loss.

One multiply-add counts as one FLOP unless ``strict=True`` is passed, in which
case it counts as two. BN, activation and pooling costs are not counted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor

# multiply-adds per generated output element
CHEAP_MACS = {"identity": 0, "pointwise": 1, "depthwise": 9}


def channel_ratio(i: int) -> float:
    """r for channel branch i (1-based): (1/2)^(i-1)."""
    return 0.5 ** (i - 1)


def temporal_factor(j: int) -> int:
    """R for temporal branch j (1-based): 2^(j-1)."""
    return 2 ** (j - 1)


def computed_channels(c_out: int, i: int) -> int:
    return math.ceil(c_out * channel_ratio(i))


@dataclass(frozen=True)
class LayerCostSpec:
    c_in: int
    c_out: int
    kernel: tuple[int, int, int]
    out_dims: tuple[int, int, int]
    groups: int = 1
    kind: str = "conv"

    def __post_init__(self):
        vals = (self.c_in, self.c_out, *self.kernel, *self.out_dims, self.groups)
        if any(v <= 0 for v in vals):
            raise ValueError(f"all LayerCostSpec fields must be positive: {self}")


def conv_flops(spec: LayerCostSpec, strict: bool = False) -> int:
    kt, kh, kw = spec.kernel
    to, ho, wo = spec.out_dims
    macs = spec.c_in * spec.c_out * kt * kh * kw * to * ho * wo // spec.groups
    return 2 * macs if strict else macs


def fc_flops(d_in: int, d_out: int, strict: bool = False) -> int:
    return (2 if strict else 1) * d_in * d_out


def gate_flops(c_in: int, t_in: int, hidden: int, s_t: int, s_c: int, strict: bool = False) -> int:
    """The two fully-connected layers of a soft modulation gate."""
    return fc_flops(c_in * t_in, hidden, strict) + fc_flops(hidden, s_t + s_c, strict)


def cheap_op_flops(spec: LayerCostSpec, active_c: Iterable[int], active_t: Iterable[int],
                   cheap_channel: str = "depthwise", cheap_temporal: str = "depthwise",
                   strict: bool = False) -> int:
    """Multiply-adds spent reconstructing features for the given active branches.

    Channel reconstruction for branch i runs once per active temporal branch j
    on T_o / R_j frames; temporal reconstruction for j > 1 then fills the
    (R_j - 1) missing frames of every group across all C_out channels.
    """
    to, ho, wo = spec.out_dims
    plane = ho * wo
    mc, mt = CHEAP_MACS[cheap_channel], CHEAP_MACS[cheap_temporal]
    active_c = sorted(set(active_c))
    total = 0
    for j in sorted(set(active_t)):
        frames = math.ceil(to / temporal_factor(j))
        for i in active_c:
            total += (spec.c_out - computed_channels(spec.c_out, i)) * frames * plane * mc
        total += (temporal_factor(j) - 1) * frames * spec.c_out * plane * mt
    return 2 * total if strict else total


def main_conv_flops(spec: LayerCostSpec, i_s_t: int, i_s_c: int, strict: bool = False) -> int:
    """Cost of the one convolution computing the largest active filter's features."""
    to, ho, wo = spec.out_dims
    reduced = LayerCostSpec(spec.c_in, computed_channels(spec.c_out, i_s_c), spec.kernel,
                            (math.ceil(to / temporal_factor(i_s_t)), ho, wo), spec.groups)
    return conv_flops(reduced, strict)


def dynamic_layer_cost(spec: LayerCostSpec, i_s_t: int, i_s_c: int,
                       cheap_channel: str = "depthwise", cheap_temporal: str = "depthwise",
                       active_t: Iterable[int] | None = None, active_c: Iterable[int] | None = None,
                       strict: bool = False) -> int:
    """(1/2)^(i_s_c + i_s_t - 2) * C(f_l) plus the exact cheap-op cost.

    Active branch sets default to the largest active filter alone.
    """
    active_t = [i_s_t] if active_t is None else list(active_t)
    active_c = [i_s_c] if active_c is None else list(active_c)
    return (main_conv_flops(spec, i_s_t, i_s_c, strict)
            + cheap_op_flops(spec, active_c, active_t, cheap_channel, cheap_temporal, strict))


def cheap_budget_ratio(spec: LayerCostSpec, s_t: int, s_c: int, cheap_channel: str = "depthwise",
                       cheap_temporal: str = "depthwise") -> float:
    """Worst-case cheap-op cost as a fraction of the FLOPs it saves, over all (i, j) != (1, 1)."""
    full = conv_flops(spec)
    worst = 0.0
    for i in range(1, s_c + 1):
        for j in range(1, s_t + 1):
            if i == j == 1:
                continue
            saved = full - main_conv_flops(spec, j, i)
            cheap = cheap_op_flops(spec, [i], [j], cheap_channel, cheap_temporal)
            worst = max(worst, cheap / saved if saved > 0 else math.inf)
    return worst


# ------------------------------------------------------------ efficiency loss

def largest_active(v: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Row-wise smallest 1-based index with weight > eps (1 if none)."""
    v = np.atleast_2d(v)
    active = v > eps
    return np.where(active.any(axis=1), active.argmax(axis=1) + 1, 1)


def literal_efficiency_loss(per_layer: Sequence[tuple[float, float, float]], correct: bool) -> float:
    """(mu0 * sum_l C_l / sum_k C_k * r_l / R_l)^2 for one clip.

    ``per_layer`` holds ``(C(f_l), r_l, R_l)`` of the largest active filters.
    """
    total = sum(c for c, _, _ in per_layer)
    if not correct or total <= 0:
        return 0.0
    s = sum(c / total * r / big_r for c, r, big_r in per_layer)
    return s * s


def efficiency_loss(costs: Sequence[float], v_t: Sequence[Tensor], v_c: Sequence[Tensor],
                    correct, mode: str = "soft", eps: float = 0.0) -> Tensor:
    """Batch-mean efficiency loss over dynamic layers.

    ``v_t[l]`` and ``v_c[l]`` are [N, S] policy tensors; ``correct`` is a boolean
    [N] array acting as the stop-gradient factor mu0. ``soft`` replaces the
    literal compute ratio by its expectation under the normalized policies,
    which coincides with ``literal`` whenever each policy has one nonzero entry.
    """
    costs = np.asarray(costs, dtype=np.float64)
    weights = costs / costs.sum()
    mu0 = np.asarray(correct, dtype=v_t[0].dtype).reshape(-1)
    if mode == "literal":
        n = mu0.shape[0]
        acc = np.zeros(n)
        for w, vt, vc in zip(weights, v_t, v_c):
            r = 0.5 ** (largest_active(vc.data, eps) - 1)
            big_r = 2.0 ** (largest_active(vt.data, eps) - 1)
            acc += w * r / big_r
        return Tensor(np.mean((mu0 * acc) ** 2), dtype=v_t[0].dtype)
    if mode != "soft":
        raise ValueError(f"mode must be 'soft' or 'literal', got {mode!r}")
    acc = None
    for w, vt, vc in zip(weights, v_t, v_c):
        ft = np.array([0.5 ** j for j in range(vt.shape[1])], dtype=vt.dtype)
        fc = np.array([0.5 ** i for i in range(vc.shape[1])], dtype=vc.dtype)
        et = (ops.policy_normalize(vt) * ft).sum(axis=1)
        ec = (ops.policy_normalize(vc) * fc).sum(axis=1)
        term = et * ec * float(w)
        acc = term if acc is None else acc + term
    return ((acc * mu0) ** 2).mean()


def total_loss(l_a, l_e, lam: float):
    if lam < 0:
        raise ValueError(f"efficiency weight must be >= 0, got {lam}")
    return l_a + l_e * lam


# ----------------------------------------------------------------- reports

@dataclass
class CostReport:
    static_gflops: float
    per_instance: list[dict] = field(default_factory=list)

    def add(self, clip_id: str, flops: float) -> None:
        self.per_instance.append({"clip_id": clip_id, "gflops": flops / 1e9})

    def _values(self) -> np.ndarray:
        return np.array([p["gflops"] for p in self.per_instance], dtype=np.float64)

    @property
    def avg(self) -> float:
        v = self._values()
        return float(v.mean()) if v.size else self.static_gflops

    @property
    def max(self) -> float:
        v = self._values()
        return float(v.max()) if v.size else self.static_gflops

    @property
    def min(self) -> float:
        v = self._values()
        return float(v.min()) if v.size else self.static_gflops

    def to_dict(self) -> dict:
        return {"static_gflops": self.static_gflops, "per_instance": self.per_instance,
                "avg": self.avg, "max": self.max, "min": self.min}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["clip_id,gflops"]
        lines += [f"{p['clip_id']},{p['gflops']:.9f}" for p in self.per_instance]
        return "\n".join(lines) + "\n"
