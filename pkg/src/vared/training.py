"""Joint training, efficiency finetuning, evaluation and policy statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import cost, ops
from .errors import ConfigError, DivergenceError
from .gate import active_branch_set
from .models import Model, PolicyTrace
from .optim import SGD, cosine_lr
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

EFF_LOSS_MODES = ("soft", "literal")


@dataclass
class TrainConfig:
    epochs_joint: int = 30
    epochs_finetune: int = 10
    lr: float = 0.05
    lr_finetune: float | None = None  # defaults to lr / 5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lambda_e: float = 0.8
    batch_size: int = 16
    seed: int = 0
    eff_loss_mode: str = "soft"
    eps_active: float = 0.0
    warmup_epochs: int = 0
    augment: bool = True
    crop_pad: int = 2

    def __post_init__(self):
        if self.lambda_e < 0:
            raise ConfigError(f"lambda_e must be >= 0, got {self.lambda_e}")
        if self.epochs_joint < 0 or self.epochs_finetune < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.eff_loss_mode not in EFF_LOSS_MODES:
            raise ConfigError(f"eff_loss_mode must be one of {EFF_LOSS_MODES}")
        if not 0 <= self.warmup_epochs <= 3:
            raise ConfigError("warmup_epochs must be in [0, 3]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ augmentation

def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random horizontal flip (p=0.5) and pad-then-crop back to the input size."""
    n, _, _, h, w = x.shape
    out = np.empty_like(x)
    padded = np.pad(x, ((0, 0), (0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge") if pad else x
    for k in range(n):
        dy, dx = rng.integers(0, 2 * pad + 1, size=2) if pad else (0, 0)
        clip = padded[k, :, :, dy:dy + h, dx:dx + w]
        out[k] = clip[..., ::-1] if rng.random() < 0.5 else clip
    return out


# --------------------------------------------------------------- costing

def policy_flops(model: Model, policies: Sequence[tuple[Tensor, Tensor]], eps: float = 0.0) -> np.ndarray:
    """Per-clip FLOPs the eval path would spend under these train-time policies."""
    base = model.static_flops() - sum(c.static_flops() for c in model.dynamic_layers)
    n = policies[0][0].shape[0] if policies else 1
    total = np.full(n, float(base))
    for conv, (v_t, v_c) in zip(model.dynamic_layers, policies):
        total += conv.gate.flops()
        for k in range(n):
            at = [j for j, _ in active_branch_set(v_t.data[k], eps)]
            ac = [i for i, _ in active_branch_set(v_c.data[k], eps)]
            total[k] += conv.realized_flops(at[0], ac[0], at, ac)
    return total


# --------------------------------------------------------------- training

def _check_dataset(dataset) -> None:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")


def _run_epochs(model: Model, dataset, cfg: TrainConfig, epochs: int, lam: float, lr: float,
                phase: str, seed_offset: int, on_epoch: Callable[[dict], None] | None) -> list[dict]:
    _check_dataset(dataset)
    history: list[dict] = []
    if epochs == 0:
        return history
    params = model.named_parameters()
    no_decay = {id(t) for k, t in params.items() if k.endswith(("gamma", "beta", "bias"))}
    opt = SGD(list(params.values()), lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    costs = [float(c.static_flops()) for c in model.dynamic_layers]
    labels_all = np.array([c.label for c in dataset], dtype=np.int64)
    n = len(dataset)
    for epoch in range(epochs):
        rng = np.random.default_rng([cfg.seed, seed_offset, epoch])
        opt.lr = cosine_lr(epoch, epochs, lr, 0.0, cfg.warmup_epochs)
        order = rng.permutation(n)
        loss_sum, correct, flops_sum = 0.0, 0, 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = np.stack([dataset[i].data for i in idx])
            if cfg.augment:
                x = augment_batch(x, rng, cfg.crop_pad)
            y = labels_all[idx]
            with Tape(list(params.values())) as tape:
                logits, policies = model.forward(x, "dynamic_train")
                loss = ops.softmax_cross_entropy(logits, y)
                hit = logits.data.argmax(axis=1) == y
                if lam > 0 and policies:
                    l_e = cost.efficiency_loss(costs, [p[0] for p in policies], [p[1] for p in policies],
                                               hit, cfg.eff_loss_mode, cfg.eps_active)
                    loss = cost.total_loss(loss, l_e, lam)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"{phase}: non-finite loss at epoch {epoch}, batch starting {start}")
            grads = tape.backward(loss)
            opt.step(grads, no_decay)
            loss_sum += value * len(idx)
            correct += int(hit.sum())
            if policies:
                flops_sum += float(policy_flops(model, policies, cfg.eps_active).sum())
            else:
                flops_sum += model.static_flops() * len(idx)
        rec = {"epoch": epoch, "loss": loss_sum / n, "acc": correct / n, "mean_gflops": flops_sum / n / 1e9}
        log.info("%s epoch %d loss %.4f acc %.3f gflops %.6f", phase, epoch, rec["loss"], rec["acc"],
                 rec["mean_gflops"])
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


def train_joint(model: Model, dataset, cfg: TrainConfig,
                on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Accuracy loss only, weights and gates updated together through the soft branch mixture."""
    return _run_epochs(model, dataset, cfg, cfg.epochs_joint, 0.0, cfg.lr, "joint", 0, on_epoch)


def finetune_efficiency(model: Model, dataset, cfg: TrainConfig,
                        on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Accuracy loss plus lambda_e times the efficiency loss."""
    lr = cfg.lr_finetune if cfg.lr_finetune is not None else cfg.lr / 5
    return _run_epochs(model, dataset, cfg, cfg.epochs_finetune, cfg.lambda_e, lr, "finetune", 1, on_epoch)


# -------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    accuracy: float
    mean_gflops: float
    max_gflops: float
    min_gflops: float
    static_gflops: float
    classes: list[str]
    layers: list[str]
    # class -> [temporal ratios per layer..., channel ratios per layer...] or None when absent
    class_ratios: dict[str, list[float] | None] = field(default_factory=dict)
    per_instance: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def mean_ratio(self, class_names: Sequence[str], dimension: str = "temporal") -> float:
        """Average compute ratio over the given classes and all dynamic layers."""
        n_l = len(self.layers)
        sl = slice(0, n_l) if dimension == "temporal" else slice(n_l, 2 * n_l)
        rows = [self.class_ratios[c][sl] for c in class_names if self.class_ratios.get(c) is not None]
        return float(np.mean(rows)) if rows else float("nan")


def evaluate(model: Model, dataset, eps_active: float = 0.0, force=None, batch_size: int = 32,
             class_names: Sequence[str] | None = None, workers: int = 1) -> EvalResult:
    """Single-clip dynamic inference over the dataset.

    Batches may run on ``workers`` threads; results are merged in dataset order.
    """
    clips = list(dataset)
    names = list(class_names or getattr(dataset, "classes", None) or
                 [str(k) for k in range(model.spec.num_classes)])
    layer_names = [c.name for c in model.dynamic_layers]

    def run(start: int) -> list[PolicyTrace]:
        chunk = clips[start:start + batch_size]
        _, tr = model.forward(np.stack([c.data for c in chunk]), "dynamic_eval", eps=eps_active, force=force,
                              clip_ids=[c.clip_id for c in chunk])
        for t, c in zip(tr, chunk):
            t.label = c.label
        return tr

    starts = range(0, len(clips), batch_size)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(s) for s in starts]
    traces = [t for chunk in chunks for t in chunk]
    n_l = len(layer_names)
    sums = {k: np.zeros(2 * n_l) for k in range(len(names))}
    counts = {k: 0 for k in range(len(names))}
    per_instance = []
    for t in traces:
        row = [2.0 ** -(d.i_s_t - 1) for d in t.layers] + [0.5 ** (d.i_s_c - 1) for d in t.layers]
        if 0 <= t.label < len(names):
            sums[t.label] += row
            counts[t.label] += 1
        per_instance.append({"clip_id": t.clip_id, "label": t.label, "prediction": t.prediction,
                             "gflops": t.flops / 1e9})
    ratios = {names[k]: (sums[k] / counts[k]).tolist() if counts[k] else None for k in range(len(names))}
    gf = np.array([p["gflops"] for p in per_instance]) if per_instance else np.zeros(1)
    acc = float(np.mean([t.prediction == t.label for t in traces])) if traces else 0.0
    return EvalResult(acc, float(gf.mean()), float(gf.max()), float(gf.min()), model.static_flops() / 1e9,
                      names, layer_names, ratios, per_instance)


def evaluate_base(model: Model, dataset, batch_size: int = 32) -> float:
    """Top-1 accuracy of the plain network with no gates."""
    clips = list(dataset)
    hits = 0
    for start in range(0, len(clips), batch_size):
        chunk = clips[start:start + batch_size]
        logits, _ = model.forward(np.stack([c.data for c in chunk]), "base")
        hits += int((logits.data.argmax(axis=1) == np.array([c.label for c in chunk])).sum())
    return hits / len(clips) if clips else 0.0


def export_policy_stats(result: EvalResult) -> tuple[str, str]:
    """Heatmap CSV (class x layer/dimension) and per-instance cost JSON."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["class"] + [f"{l}:temporal" for l in result.layers] + [f"{l}:channel" for l in result.layers]
    w.writerow(header)
    for name in result.classes:
        row = result.class_ratios.get(name)
        w.writerow([name] + (["" for _ in header[1:]] if row is None else [f"{v:.6f}" for v in row]))
    instances = json.dumps(result.per_instance, indent=2, sort_keys=True)
    return buf.getvalue(), instances
