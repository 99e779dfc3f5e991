"""The static-vs-motion behavioral experiment on the synthetic 4-class dataset.

Trains toy3d jointly, finetunes with the efficiency loss, and compares the
result against the same network with every gate forced to full compute and
against its gate-free base path.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

from .data import Dataset, default_synth_config, synth_generate
from .models import Model, get_spec
from .training import TrainConfig, evaluate, evaluate_base, finetune_efficiency, train_joint

log = logging.getLogger(__name__)

STATIC_CLASSES = ("static_rect", "static_circle")
MOTION_CLASSES = ("moving_stripes", "moving_cross")
HELDOUT_SEED_OFFSET = 1000


@dataclass
class BehaviorResult:
    seed: int
    seconds: float
    train_acc_joint: float  # last joint epoch, augmented training batches
    gflops_full: float
    gflops_joint: float
    gflops_finetuned: float
    acc_joint: float
    flops_drop: float  # 1 - finetuned / forced-full
    acc_base: float
    acc_full: float
    acc_finetuned: float
    temporal_ratio_static: float
    temporal_ratio_motion: float
    channel_ratio_static: float
    channel_ratio_motion: float

    @property
    def passes_flops(self) -> bool:
        return self.flops_drop >= 0.15

    @property
    def passes_accuracy(self) -> bool:
        return abs(self.acc_finetuned - self.acc_base) <= 0.01

    @property
    def passes_ordering(self) -> bool:
        return self.temporal_ratio_static < self.temporal_ratio_motion

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(passes_flops=self.passes_flops, passes_accuracy=self.passes_accuracy,
                 passes_ordering=self.passes_ordering)
        return d


def make_datasets(seed: int, clips_per_class: int = 100) -> tuple[Dataset, Dataset]:
    """Training set and an equally sized held-out set drawn with a different seed."""
    out = []
    for s in (seed, seed + HELDOUT_SEED_OFFSET):
        cfg = default_synth_config(clips_per_class=clips_per_class, seed=s)
        out.append(Dataset(synth_generate(cfg), [c.name for c in cfg.classes]))
    return out[0], out[1]


def run_behavior(seed: int, cfg: TrainConfig | None = None, clips_per_class: int = 100) -> BehaviorResult:
    cfg = cfg or TrainConfig(seed=seed)
    train, heldout = make_datasets(seed, clips_per_class)
    model = Model(get_spec("toy3d"), seed=seed)
    t0 = time.perf_counter()
    hist = train_joint(model, train, cfg)
    joint = evaluate(model, heldout)
    finetune_efficiency(model, train, cfg)
    full = evaluate(model, heldout, force="full")
    post = evaluate(model, heldout)
    acc_base = evaluate_base(model, heldout)
    res = BehaviorResult(
        seed=seed, seconds=time.perf_counter() - t0,
        train_acc_joint=hist[-1]["acc"] if hist else float("nan"),
        gflops_full=full.mean_gflops, gflops_joint=joint.mean_gflops, gflops_finetuned=post.mean_gflops,
        acc_joint=joint.accuracy,
        flops_drop=1.0 - post.mean_gflops / full.mean_gflops,
        acc_base=acc_base, acc_full=full.accuracy, acc_finetuned=post.accuracy,
        temporal_ratio_static=post.mean_ratio(STATIC_CLASSES, "temporal"),
        temporal_ratio_motion=post.mean_ratio(MOTION_CLASSES, "temporal"),
        channel_ratio_static=post.mean_ratio(STATIC_CLASSES, "channel"),
        channel_ratio_motion=post.mean_ratio(MOTION_CLASSES, "channel"),
    )
    log.info("seed %d: %s", seed, res.to_dict())
    return res
