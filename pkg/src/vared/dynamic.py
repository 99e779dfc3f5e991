"""Temporal- and channel-wise dynamic convolutions with cheap reconstruction.

A dynamic layer owns one "big kernel". Branch (i, j) computes the first
ceil((1/2)^(i-1) * C_out) output channels at temporal stride S * 2^(j-1) and
rebuilds the rest: missing channels from computed ones, then missing frames
from computed frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cost, ops
from .errors import ShapeError, SpecError
from .gate import SoftGate, active_branch_set
from .tensor import Tensor

CHEAP_KINDS = ("identity", "pointwise", "depthwise")


class CheapOp:
    """A bank of per-map cheap linear generators.

    ``depthwise``: one k x k spatial kernel per generated map (zero "same"
    padding); ``pointwise``: one scalar per map; ``identity``: no weights.
    Kernels start as identity so reconstruction initially duplicates.
    """

    def __init__(self, kind: str, n_maps: int, k: int = 3):
        if kind not in CHEAP_KINDS:
            raise SpecError(f"unknown cheap op kind {kind!r}; expected one of {CHEAP_KINDS}")
        self.kind, self.n_maps, self.k = kind, n_maps, k
        self.weight: Tensor | None = None
        if kind == "depthwise":
            w = np.zeros((n_maps, k, k))
            w[:, k // 2, k // 2] = 1.0
            self.weight = Tensor(w, requires_grad=True)
        elif kind == "pointwise":
            self.weight = Tensor(np.ones(n_maps), requires_grad=True)

    @property
    def macs_per_element(self) -> int:
        return cost.CHEAP_MACS[self.kind]

    def apply(self, y: Tensor, start: int) -> Tensor:
        """Generate maps from ``y`` [N, G, T, H, W] using weight rows start..start+G."""
        g = y.shape[1]
        if self.kind == "identity":
            return y
        if start + g > self.n_maps:
            raise ShapeError(f"cheap op has {self.n_maps} maps, asked for rows {start}..{start + g}")
        rows = ops.getitem(self.weight, slice(start, start + g))
        if self.kind == "pointwise":
            return y * ops.reshape(rows, (1, g, 1, 1, 1))
        p = self.k // 2
        return ops.conv3d(y, ops.reshape(rows, (g, 1, 1, self.k, self.k)), padding=(0, p, p), groups=g)


def channel_reconstruct(yprime: Tensor, c_out: int, cheap: CheapOp) -> Tensor:
    """Y = [Y', Phi^c(Y')]: generated channel g reads source channel g mod (r * C_out)."""
    computed = yprime.shape[1]
    if computed > c_out:
        raise ShapeError(f"channel_reconstruct: {computed} computed channels exceed C_out={c_out}")
    if computed == c_out:
        return yprime
    src = [g % computed for g in range(computed, c_out)]
    generated = cheap.apply(ops.take(yprime, src, axis=1), start=computed)
    return ops.concat([yprime, generated], axis=1)


def temporal_reconstruct(yprime: Tensor, big_r: int, cheap: CheapOp, layer: str = "") -> Tensor:
    """Y[j + iR] = Y'[i] for j = 0 and Phi^t_j(Y'[i]) otherwise.

    Weights of Phi^t are shared across positions i; offset j uses the j-th
    block of C_out rows in ``cheap``.
    """
    if big_r == 1:
        return yprime
    n, c, t, h, w = yprime.shape
    if cheap.kind != "identity" and cheap.n_maps < (big_r - 1) * c:
        raise ShapeError(f"temporal cheap op{(' of ' + layer) if layer else ''} has {cheap.n_maps} maps, "
                         f"R={big_r} needs {(big_r - 1) * c}")
    frames = [yprime] + [cheap.apply(yprime, start=(j - 1) * c) for j in range(1, big_r)]
    return ops.reshape(ops.stack(frames, axis=3), (n, c, t * big_r, h, w))


@dataclass
class DynamicConvConfig:
    c_in: int
    c_out: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    s_t: int = 2
    s_c: int = 2
    cheap_channel: str = "depthwise"
    cheap_temporal: str = "depthwise"
    bias: bool = False
    normalize_policy: bool = True
    gate_hidden: int = 16


@dataclass
class LayerDecision:
    """What one dynamic layer did for one clip at inference."""

    v_t: np.ndarray
    v_c: np.ndarray
    i_s_t: int
    i_s_c: int
    active_t: list[int]
    active_c: list[int]
    flops: int
    gate_flops: int
    extra: dict = field(default_factory=dict)


class DynamicConv3d:
    """Conv layer with gate, channel/temporal cheap ops and shared-weight execution."""

    def __init__(self, cfg: DynamicConvConfig, in_dims: tuple[int, int, int],
                 rng: np.random.Generator | None = None, name: str = "dyn"):
        rng = rng or np.random.default_rng(0)
        self.cfg, self.name, self.in_dims = cfg, name, tuple(in_dims)
        self.out_dims = ops.conv_output_shape(in_dims, cfg.kernel, cfg.stride, cfg.padding)
        if cfg.c_out % (2 ** (cfg.s_c - 1)):
            raise SpecError(f"{name}: C_out={cfg.c_out} not divisible by 2^(S_c-1)={2 ** (cfg.s_c - 1)}")
        r_max = 2 ** (cfg.s_t - 1)
        if self.out_dims[0] % r_max:
            raise SpecError(f"{name}: output length T_o={self.out_dims[0]} not divisible by "
                            f"2^(S_t-1)={r_max}")
        fan_in = cfg.c_in * int(np.prod(cfg.kernel))
        self.weight = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), (cfg.c_out, cfg.c_in, *cfg.kernel)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(cfg.c_out), requires_grad=True) if cfg.bias else None
        self.cheap_c = CheapOp(cfg.cheap_channel, cfg.c_out)
        self.cheap_t = CheapOp(cfg.cheap_temporal, max(r_max - 1, 1) * cfg.c_out)
        self.gate = SoftGate(cfg.c_in, in_dims[0], cfg.s_t, cfg.s_c, cfg.gate_hidden, rng)
        self.cost_spec = cost.LayerCostSpec(cfg.c_in, cfg.c_out, tuple(cfg.kernel), self.out_dims)

    # ----------------------------------------------------------- params
    def parameters(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        if self.cheap_c.weight is not None:
            out["cheap_c"] = self.cheap_c.weight
        if self.cheap_t.weight is not None:
            out["cheap_t"] = self.cheap_t.weight
        out.update({f"gate.{k}": v for k, v in self.gate.parameters().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"gate.{k}": v for k, v in self.gate.buffers().items()}

    # ---------------------------------------------------------- compute
    def _conv(self, x: Tensor, channels: int | None = None, big_r: int = 1) -> Tensor:
        cfg = self.cfg
        w, b = self.weight, self.bias
        if channels is not None and channels < cfg.c_out:
            w = ops.getitem(w, slice(0, channels))
            b = ops.getitem(b, slice(0, channels)) if b is not None else None
        stride = (cfg.stride[0] * big_r, cfg.stride[1], cfg.stride[2])
        return ops.conv3d(x, w, b, stride=stride, padding=cfg.padding)

    def plain_forward(self, x: Tensor) -> Tensor:
        return self._conv(x)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.cfg.c_in or tuple(x.shape[2:]) != self.in_dims:
            raise ShapeError(f"{self.name}: expected input [N,{self.cfg.c_in},{','.join(map(str, self.in_dims))}],"
                             f" got {list(x.shape)}")

    def channel_reconstruct(self, yprime: Tensor) -> Tensor:
        return channel_reconstruct(yprime, self.cfg.c_out, self.cheap_c)

    def temporal_reconstruct(self, yprime: Tensor, big_r: int) -> Tensor:
        return temporal_reconstruct(yprime, big_r, self.cheap_t, self.name)

    def branch_forward(self, x: Tensor, i_c: int, j_t: int) -> Tensor:
        """Explicit, non-shared computation of branch (i_c, j_t)."""
        if not (1 <= i_c <= self.cfg.s_c and 1 <= j_t <= self.cfg.s_t):
            raise ShapeError(f"{self.name}: branch ({i_c}, {j_t}) outside search space "
                             f"S_c={self.cfg.s_c}, S_t={self.cfg.s_t}")
        big_r = cost.temporal_factor(j_t)
        y = self._conv(x, cost.computed_channels(self.cfg.c_out, i_c), big_r)
        return self.temporal_reconstruct(self.channel_reconstruct(y), big_r)

    def _weights(self, v: Tensor) -> Tensor:
        return ops.policy_normalize(v) if self.cfg.normalize_policy else ops.policy_fallback(v)

    def shared_weight_forward(self, x: Tensor, v_t, v_c, mode: str = "train", eps: float = 0.0,
                              trace: list | None = None) -> Tensor:
        """Weighted sum of all branches computed from one big-kernel result.

        ``v_t`` [N, S_t] and ``v_c`` [N, S_c] are per-clip policies. In train mode
        every branch with a nonzero weight somewhere in the batch is built
        from slices of the full convolution. In eval mode each clip computes
        only the features of its largest active filter and appends a
        :class:`LayerDecision` to ``trace``.
        """
        cfg = self.cfg
        v_t = v_t if isinstance(v_t, Tensor) else Tensor(np.atleast_2d(v_t))
        v_c = v_c if isinstance(v_c, Tensor) else Tensor(np.atleast_2d(v_c))
        if v_t.shape[1] != cfg.s_t or v_c.shape[1] != cfg.s_c:
            raise ShapeError(f"{self.name}: policy lengths ({v_t.shape[1]}, {v_c.shape[1]}) != "
                             f"(S_t={cfg.s_t}, S_c={cfg.s_c})")
        if v_t.shape[0] != x.shape[0] or v_c.shape[0] != x.shape[0]:
            raise ShapeError(f"{self.name}: {v_t.shape[0]} policies for batch of {x.shape[0]}")
        self._check_input(x)
        if mode == "train":
            return self._train_forward(x, v_t, v_c)
        if mode == "eval":
            return self._eval_forward(x, v_t, v_c, eps, trace)
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    def _train_forward(self, x: Tensor, v_t: Tensor, v_c: Tensor) -> Tensor:
        cfg = self.cfg
        wt, wc = self._weights(v_t), self._weights(v_c)
        live_t = np.flatnonzero((wt.data != 0).any(axis=0)) + 1
        live_c = np.flatnonzero((wc.data != 0).any(axis=0)) + 1
        y_full = self._conv(x)
        out = None
        for j in live_t:
            big_r = cost.temporal_factor(j)
            y_j = ops.getitem(y_full, (slice(None), slice(None), slice(None, None, big_r))) if big_r > 1 else y_full
            mixed = None
            for i in live_c:
                c = cost.computed_channels(cfg.c_out, i)
                part = y_j if c == cfg.c_out else ops.getitem(y_j, (slice(None), slice(0, c)))
                term = self.channel_reconstruct(part) * ops.reshape(wc[:, i - 1], (-1, 1, 1, 1, 1))
                mixed = term if mixed is None else mixed + term
            term = self.temporal_reconstruct(mixed, big_r) * ops.reshape(wt[:, j - 1], (-1, 1, 1, 1, 1))
            out = term if out is None else out + term
        return out

    def _eval_forward(self, x: Tensor, v_t: Tensor, v_c: Tensor, eps: float, trace: list | None) -> Tensor:
        cfg = self.cfg
        outs = []
        for n in range(x.shape[0]):
            vt, vc = v_t.data[n], v_c.data[n]
            act_t, act_c = active_branch_set(vt, eps), active_branch_set(vc, eps)
            if cfg.normalize_policy:
                st, sc = sum(w for _, w in act_t), sum(w for _, w in act_c)
                act_t = [(j, w / st) for j, w in act_t]
                act_c = [(i, w / sc) for i, w in act_c]
            i_s_t, i_s_c = act_t[0][0], act_c[0][0]
            r_s = cost.temporal_factor(i_s_t)
            xn = ops.getitem(x, slice(n, n + 1))
            y_small = self._conv(xn, cost.computed_channels(cfg.c_out, i_s_c), r_s)
            out = None
            for j, w_j in act_t:
                big_r = cost.temporal_factor(j)
                step = big_r // r_s
                y_j = ops.getitem(y_small, (slice(None), slice(None), slice(None, None, step))) if step > 1 else y_small
                mixed = None
                for i, w_i in act_c:
                    c = cost.computed_channels(cfg.c_out, i)
                    part = y_j if c == y_j.shape[1] else ops.getitem(y_j, (slice(None), slice(0, c)))
                    term = self.channel_reconstruct(part) * np.asarray(w_i, dtype=x.dtype)
                    mixed = term if mixed is None else mixed + term
                term = self.temporal_reconstruct(mixed, big_r) * np.asarray(w_j, dtype=x.dtype)
                out = term if out is None else out + term
            outs.append(out)
            if trace is not None:
                at, ac = [j for j, _ in act_t], [i for i, _ in act_c]
                trace.append(LayerDecision(
                    v_t=np.array(vt, dtype=np.float64), v_c=np.array(vc, dtype=np.float64),
                    i_s_t=i_s_t, i_s_c=i_s_c, active_t=at, active_c=ac,
                    flops=self.realized_flops(i_s_t, i_s_c, at, ac), gate_flops=self.gate.flops()))
        return outs[0] if len(outs) == 1 else ops.concat(outs, axis=0)

    # ------------------------------------------------------------- cost
    def static_flops(self) -> int:
        return cost.conv_flops(self.cost_spec)

    def realized_flops(self, i_s_t: int, i_s_c: int, active_t, active_c) -> int:
        return cost.dynamic_layer_cost(self.cost_spec, i_s_t, i_s_c, self.cfg.cheap_channel,
                                       self.cfg.cheap_temporal, active_t=active_t, active_c=active_c)

    def cheap_budget(self) -> float:
        return cost.cheap_budget_ratio(self.cost_spec, self.cfg.s_t, self.cfg.s_c,
                                       self.cfg.cheap_channel, self.cfg.cheap_temporal)

