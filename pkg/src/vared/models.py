"""Declarative model specs, builders and the three forward modes.

Shipped specs:

* ``toy3d`` -- four 3-D conv blocks (8, 16, 32, 64 channels), all dynamic.
* ``r2plus1d_tiny`` -- factorized (2+1)D blocks; only the spatial convs are dynamic.
* ``r2plus1d18`` -- cost-only layer table of R(2+1)D-18 for FLOPs reporting.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import cost, ops
from .dynamic import DynamicConv3d, DynamicConvConfig, LayerDecision
from .errors import ShapeError, SpecError
from .tensor import Tensor

MODES = ("base", "dynamic_train", "dynamic_eval")


@dataclass
class LayerSpec:
    name: str
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)
    dynamic: bool = False
    cheap_channel: str = "depthwise"
    cheap_temporal: str = "depthwise"
    bn: bool = True
    relu: bool = True
    role: str = ""
    # index of the layer feeding this one; None = previous layer, -1 = model input
    source: int | None = None
    s_t: int | None = None
    s_c: int | None = None

    def __post_init__(self):
        self.kernel = tuple(self.kernel)
        self.stride = tuple(self.stride)
        self.padding = tuple(self.padding)


@dataclass
class LayerShape:
    index: int
    spec: LayerSpec
    in_shape: tuple[int, int, int, int]  # C, T, H, W
    out_shape: tuple[int, int, int, int]
    s_t: int
    s_c: int

    @property
    def cost_spec(self) -> cost.LayerCostSpec:
        return cost.LayerCostSpec(self.in_shape[0], self.out_shape[0], self.spec.kernel, self.out_shape[1:])


@dataclass
class ModelSpec:
    name: str
    input: tuple[int, int, int, int]
    num_classes: int
    layers: list[LayerSpec]
    s_t: int = 2
    s_c: int = 2
    gate_hidden: int = 16
    executable: bool = True
    # the classifier's cost depends on the label set; cost-only trunk listings leave it out
    count_head: bool = True

    def __post_init__(self):
        self.input = tuple(self.input)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]

    # ------------------------------------------------------------ shapes
    def shapes(self) -> list[LayerShape]:
        """Propagate shapes and validate the spec; errors name the layer index."""
        outs: list[tuple[int, int, int, int]] = []
        result = []
        for idx, layer in enumerate(self.layers):
            src = idx - 1 if layer.source is None else layer.source
            if src >= idx or src < -1:
                raise SpecError(f"layer {idx} ({layer.name}): source {src} must precede it")
            in_shape = self.input if src == -1 else outs[src]
            try:
                t, h, w = ops.conv_output_shape(in_shape[1:], layer.kernel, layer.stride, layer.padding)
            except ShapeError as exc:
                raise SpecError(f"layer {idx} ({layer.name}): {exc}") from None
            out = (layer.out_channels, t, h, w)
            s_t = layer.s_t or self.s_t
            s_c = layer.s_c or self.s_c
            if layer.dynamic:
                if t % 2 ** (s_t - 1):
                    raise SpecError(f"layer {idx} ({layer.name}): output length T_o={t} not divisible by "
                                    f"2^(S_t-1)={2 ** (s_t - 1)}")
                if self.executable and layer.out_channels % 2 ** (s_c - 1):
                    raise SpecError(f"layer {idx} ({layer.name}): C_out={layer.out_channels} not divisible by "
                                    f"2^(S_c-1)={2 ** (s_c - 1)}")
            outs.append(out)
            result.append(LayerShape(idx, layer, in_shape, out, s_t, s_c))
        if self.executable:
            for ls in result:
                if ls.spec.source not in (None,) and ls.spec.source != ls.index - 1:
                    raise SpecError(f"layer {ls.index} ({ls.spec.name}): executable specs must be chains")
        return result

    def validate(self) -> list[LayerShape]:
        shapes = self.shapes()
        for ls in shapes:
            if ls.spec.dynamic:
                ratio = cost.cheap_budget_ratio(ls.cost_spec, ls.s_t, ls.s_c, ls.spec.cheap_channel,
                                                ls.spec.cheap_temporal)
                if ratio >= 0.1:
                    raise SpecError(f"layer {ls.index} ({ls.spec.name}): cheap ops cost {ratio:.1%} of the "
                                    f"FLOPs they replace (limit 10%)")
        return shapes

    def head_in(self) -> int:
        return self.shapes()[-1].out_shape[0]

    # --------------------------------------------------------- serialize
    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["layers"] = [LayerSpec(**l) for l in d["layers"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- specs

def toy3d_spec(frames: int = 8, res: int = 32, num_classes: int = 4) -> ModelSpec:
    layers = [
        # k_t = 1 and 3 input channels: a depthwise cheap op would exceed the budget
        LayerSpec("block1", 8, (1, 3, 3), (1, 2, 2), (0, 1, 1), dynamic=True,
                  cheap_channel="pointwise", cheap_temporal="pointwise"),
        LayerSpec("block2", 16, (3, 3, 3), (1, 2, 2), (1, 1, 1), dynamic=True),
        LayerSpec("block3", 32, (3, 3, 3), (1, 2, 2), (1, 1, 1), dynamic=True),
        LayerSpec("block4", 64, (3, 3, 3), (1, 1, 1), (1, 1, 1), dynamic=True),
    ]
    return ModelSpec("toy3d", (3, frames, res, res), num_classes, layers)


def r2plus1d_tiny_spec(frames: int = 8, res: int = 32, num_classes: int = 4) -> ModelSpec:
    def block(name, c_out, spatial_stride, temporal_stride, cheap="depthwise"):
        return [
            LayerSpec(f"{name}.spatial", c_out, (1, 3, 3), (1, spatial_stride, spatial_stride), (0, 1, 1),
                      dynamic=True, role="spatial", cheap_channel=cheap, cheap_temporal=cheap),
            LayerSpec(f"{name}.temporal", c_out, (3, 1, 1), (temporal_stride, 1, 1), (1, 0, 0),
                      role="temporal"),
        ]

    layers = block("stem", 16, 2, 1, cheap="pointwise") + block("b1", 32, 2, 2) + block("b2", 64, 2, 1)
    return ModelSpec("r2plus1d_tiny", (3, frames, res, res), num_classes, layers)


def _midplanes(c_in: int, c_out: int) -> int:
    return (c_in * c_out * 3 * 3 * 3) // (c_in * 3 * 3 + 3 * c_out)


def r2plus1d18_cost_spec(frames: int = 16, res: int = 128, num_classes: int = 200) -> ModelSpec:
    """Layer table of R(2+1)D-18 (factorized stem, four stages of two basic blocks).

    Cost-only: residual additions are not represented, the downsample
    1x1x1 convs read their block input through ``source`` and the classifier
    head is not counted.
    """
    if frames not in (8, 16, 32):
        raise SpecError(f"frames must be one of 8, 16, 32, got {frames}")
    layers: list[LayerSpec] = []

    def add(spec: LayerSpec) -> int:
        layers.append(spec)
        return len(layers) - 1

    add(LayerSpec("stem.spatial", 45, (1, 7, 7), (1, 2, 2), (0, 3, 3), dynamic=True, role="spatial"))
    last = add(LayerSpec("stem.temporal", 64, (3, 1, 1), (1, 1, 1), (1, 0, 0), role="temporal"))
    c_in, t = 64, frames
    for stage, planes in enumerate((64, 128, 256, 512), start=1):
        for blk in range(2):
            stride = 2 if stage > 1 and blk == 0 else 1
            block_in, block_src = c_in, last
            for conv in (1, 2):
                cin = block_in if conv == 1 else planes
                s = stride if conv == 1 else 1
                mid = _midplanes(cin, planes)
                st = 1 if t < 2 else None
                add(LayerSpec(f"layer{stage}.{blk}.conv{conv}.spatial", mid, (1, 3, 3), (1, s, s), (0, 1, 1),
                              dynamic=True, role="spatial", s_t=st))
                last = add(LayerSpec(f"layer{stage}.{blk}.conv{conv}.temporal", planes, (3, 1, 1), (s, 1, 1),
                                     (1, 0, 0), role="temporal"))
                if conv == 1 and stride == 2:
                    t = t // 2
            if stride != 1 or block_in != planes:
                add(LayerSpec(f"layer{stage}.{blk}.downsample", planes, (1, 1, 1), (stride, stride, stride),
                              source=block_src, role="downsample", relu=False))
                # the next block reads the residual sum, shape-equal to `last`
            c_in = planes
    return ModelSpec("r2plus1d18", (3, frames, res, res), num_classes, layers, executable=False,
                     count_head=False)


ARCHS = {
    "toy3d": toy3d_spec,
    "r2plus1d_tiny": r2plus1d_tiny_spec,
    "r2plus1d18": r2plus1d18_cost_spec,
}


def get_spec(arch: str, frames: int | None = None, res: int | None = None, **kw) -> ModelSpec:
    try:
        fn = ARCHS[arch]
    except KeyError:
        raise SpecError(f"unknown arch {arch!r}; known: {', '.join(sorted(ARCHS))}") from None
    args = {}
    if frames is not None:
        args["frames"] = frames
    if res is not None:
        args["res"] = res
    return fn(**args, **kw)


# ---------------------------------------------------------------- traces

@dataclass
class PolicyTrace:
    clip_id: str
    layers: list[LayerDecision]
    prediction: int = -1
    label: int = -1
    flops: int = 0

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id, "prediction": self.prediction, "label": self.label,
            "flops": self.flops,
            "layers": [{"v_t": d.v_t.tolist(), "v_c": d.v_c.tolist(), "i_s_t": d.i_s_t, "i_s_c": d.i_s_c,
                        "active_t": d.active_t, "active_c": d.active_c, "flops": d.flops,
                        "gate_flops": d.gate_flops} for d in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyTrace":
        layers = [LayerDecision(np.asarray(l["v_t"]), np.asarray(l["v_c"]), l["i_s_t"], l["i_s_c"],
                                list(l["active_t"]), list(l["active_c"]), l["flops"], l["gate_flops"])
                  for l in d["layers"]]
        return cls(d["clip_id"], layers, d.get("prediction", -1), d.get("label", -1), d.get("flops", 0))


def model_flops(spec: ModelSpec, trace: PolicyTrace | None = None, strict: bool = False) -> int:
    """Static FLOPs (no trace) or realized per-clip FLOPs including gates and cheap ops."""
    shapes = spec.shapes()
    dyn = [ls for ls in shapes if ls.spec.dynamic]
    if trace is not None and len(trace.layers) != len(dyn):
        raise SpecError(f"trace has {len(trace.layers)} layer records, {spec.name} has {len(dyn)} dynamic layers")
    decisions = iter(trace.layers) if trace is not None else None
    total = 0
    for ls in shapes:
        cs = ls.cost_spec
        if ls.spec.dynamic and decisions is not None:
            d = next(decisions)
            total += cost.dynamic_layer_cost(cs, d.i_s_t, d.i_s_c, ls.spec.cheap_channel, ls.spec.cheap_temporal,
                                             active_t=d.active_t, active_c=d.active_c, strict=strict)
            total += cost.gate_flops(ls.in_shape[0], ls.in_shape[1], spec.gate_hidden, ls.s_t, ls.s_c, strict)
        else:
            total += cost.conv_flops(cs, strict)
    if spec.count_head:
        total += cost.fc_flops(shapes[-1].out_shape[0], spec.num_classes, strict)
    return total


def gate_flops_total(spec: ModelSpec) -> int:
    return sum(cost.gate_flops(ls.in_shape[0], ls.in_shape[1], spec.gate_hidden, ls.s_t, ls.s_c)
               for ls in spec.shapes() if ls.spec.dynamic)


def dynamic_layer_costs(spec: ModelSpec) -> list[int]:
    return [cost.conv_flops(ls.cost_spec) for ls in spec.shapes() if ls.spec.dynamic]


# ----------------------------------------------------------------- model

class _StaticConv:
    def __init__(self, ls: LayerShape, rng: np.random.Generator):
        k = ls.spec.kernel
        fan_in = ls.in_shape[0] * int(np.prod(k))
        self.weight = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), (ls.out_shape[0], ls.in_shape[0], *k)),
                             requires_grad=True)
        self.stride, self.padding = ls.spec.stride, ls.spec.padding

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def plain_forward(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, stride=self.stride, padding=self.padding)


class _BatchNorm:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = ops.RunningStats(channels, dtype=self.gamma.dtype)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.stats, mode)


class Model:
    """A built, executable :class:`ModelSpec` with He-initialized parameters."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        if not spec.executable:
            raise SpecError(f"{spec.name} is a cost-only spec and cannot be built")
        self.spec = spec
        self.shapes = spec.validate()
        rng = np.random.default_rng(seed)
        self.convs: list = []
        self.bns: list[_BatchNorm | None] = []
        for ls in self.shapes:
            if ls.spec.dynamic:
                cfg = DynamicConvConfig(ls.in_shape[0], ls.out_shape[0], ls.spec.kernel, ls.spec.stride,
                                        ls.spec.padding, ls.s_t, ls.s_c, ls.spec.cheap_channel,
                                        ls.spec.cheap_temporal, gate_hidden=spec.gate_hidden)
                self.convs.append(DynamicConv3d(cfg, ls.in_shape[1:], rng, name=ls.spec.name))
            else:
                self.convs.append(_StaticConv(ls, rng))
            self.bns.append(_BatchNorm(ls.out_shape[0]) if ls.spec.bn else None)
        c_last = self.shapes[-1].out_shape[0]
        self.head_w = Tensor(rng.normal(0.0, math.sqrt(1.0 / c_last), (c_last, spec.num_classes)),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(spec.num_classes), requires_grad=True)

    @property
    def dynamic_layers(self) -> list[DynamicConv3d]:
        return [c for c in self.convs if isinstance(c, DynamicConv3d)]

    # -------------------------------------------------------- state
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for ls, conv, bn in zip(self.shapes, self.convs, self.bns):
            for k, v in conv.parameters().items():
                out[f"{ls.spec.name}.{k}"] = v
            if bn is not None:
                out[f"{ls.spec.name}.bn.gamma"] = bn.gamma
                out[f"{ls.spec.name}.bn.beta"] = bn.beta
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for ls, conv, bn in zip(self.shapes, self.convs, self.bns):
            for k, v in conv.buffers().items():
                out[f"{ls.spec.name}.{k}"] = v
            if bn is not None:
                out[f"{ls.spec.name}.bn.running_mean"] = bn.stats.mean
                out[f"{ls.spec.name}.bn.running_var"] = bn.stats.var
        return out

    def gate_parameter_names(self) -> list[str]:
        return [k for k in self.named_parameters() if ".gate." in k]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params, bufs = self.named_parameters(), self.named_buffers()
        missing = (set(params) | set(bufs)) - set(state)
        if missing:
            raise SpecError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
        for k, t in params.items():
            if t.data.shape != tuple(state[k].shape):
                raise ShapeError(f"{k}: checkpoint shape {tuple(state[k].shape)} != model shape {t.data.shape}")
            t.data[...] = state[k]
        for k, b in bufs.items():
            b[...] = state[k]

    def static_flops(self) -> int:
        return model_flops(self.spec)

    # ------------------------------------------------------ forward
    def forward(self, clip, mode: str = "dynamic_eval", eps: float = 0.0, force: str | None = None,
                bn_mode: str | None = None, clip_ids: Sequence[str] | None = None,
                capture: list | None = None):
        """Run the network.

        Returns ``(logits, aux)``: ``aux`` is ``None`` for ``base``, the list of
        per-layer ``(V_t, V_c)`` tensors for ``dynamic_train`` and one
        :class:`PolicyTrace` per clip for ``dynamic_eval``. ``force="full"``
        overrides every gate with the full-compute branch (gates still run and
        are still costed); a ``(temporal, channel)`` pair forces those branches. ``capture`` receives every conv output.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        x = clip if isinstance(clip, Tensor) else Tensor(clip)
        if x.ndim == 4:
            x = ops.reshape(x, (1, *x.shape))
        if tuple(x.shape[1:]) != self.spec.input:
            raise ShapeError(f"{self.spec.name} expects clips of shape {self.spec.input}, got {tuple(x.shape[1:])}")
        n = x.shape[0]
        bn_mode = bn_mode or ("train" if mode == "dynamic_train" else "eval")
        policies = []
        per_clip: list[list[LayerDecision]] = [[] for _ in range(n)]
        for ls, conv, bn in zip(self.shapes, self.convs, self.bns):
            if isinstance(conv, DynamicConv3d) and mode != "base":
                v_t, v_c = conv.gate(x, bn_mode)
                if force is not None:
                    j_t, i_c = _forced_branches(force, ls)
                    v_t, v_c = _one_hot(n, ls.s_t, x.dtype, j_t), _one_hot(n, ls.s_c, x.dtype, i_c)
                if mode == "dynamic_train":
                    policies.append((v_t, v_c))
                    y = conv.shared_weight_forward(x, v_t, v_c, "train")
                else:
                    trace: list[LayerDecision] = []
                    y = conv.shared_weight_forward(x, v_t, v_c, "eval", eps=eps, trace=trace)
                    for k, d in enumerate(trace):
                        per_clip[k].append(d)
            else:
                y = conv.plain_forward(x)
            if capture is not None:
                capture.append((ls.spec.name, y.data))
            if bn is not None:
                y = bn(y, bn_mode)
            if ls.spec.relu:
                y = ops.relu(y)
            x = y
        logits = ops.fully_connected(ops.global_avg_pool(x), self.head_w, self.head_b)
        if mode == "base":
            return logits, None
        if mode == "dynamic_train":
            return logits, policies
        preds = logits.data.argmax(axis=1)
        head = cost.fc_flops(self.head_w.shape[0], self.head_w.shape[1])
        static_rest = sum(cost.conv_flops(ls.cost_spec) for ls in self.shapes if not ls.spec.dynamic)
        traces = []
        for k in range(n):
            decisions = per_clip[k]
            flops = static_rest + head + sum(d.flops + d.gate_flops for d in decisions)
            cid = clip_ids[k] if clip_ids is not None else str(k)
            traces.append(PolicyTrace(cid, decisions, int(preds[k]), -1, int(flops)))
        return logits, traces

    __call__ = forward


def _forced_branches(force, ls: LayerShape) -> tuple[int, int]:
    """``"full"`` or a 1-based ``(temporal, channel)`` branch pair, clamped to the search space."""
    if force == "full":
        return 1, 1
    try:
        j_t, i_c = (int(v) for v in force)
    except (TypeError, ValueError):
        raise ValueError(f"force must be 'full' or a (temporal, channel) branch pair, got {force!r}") from None
    if j_t < 1 or i_c < 1:
        raise ValueError(f"forced branch indices are 1-based, got {force!r}")
    return min(j_t, ls.s_t), min(i_c, ls.s_c)


def _one_hot(n: int, s: int, dtype, index: int = 1) -> Tensor:
    v = np.zeros((n, s), dtype=dtype)
    v[:, index - 1] = 1
    return Tensor(v, dtype=dtype)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed)
