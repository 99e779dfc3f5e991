"""Feature-map similarity measurement along the temporal and channel axes.

A "feature map" is one [H, W] plane of a [C, T, H, W] activation. Temporal
pairs are (c, t) vs (c, t+1); channel pairs are (c, t) vs (c+1, t). A pair is
flagged redundant when CC >= cc_threshold and RMSE <= rmse_threshold; the
``literal_rule`` option instead requires both values to be at or above their
thresholds.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CC_THRESHOLD = 0.85
DEFAULT_RMSE_THRESHOLD = 0.001
DIMENSIONS = ("temporal", "channel")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def pearson_cc(a, b) -> float:
    """Pearson correlation; 0.0 when either side has zero variance."""
    a, b = _pair(a, b)
    if a.size < 2:
        raise ValueError("pearson_cc needs at least 2 values")
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return 0.0
    return float(np.clip((da * db).sum() / denom, -1.0, 1.0))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def _batched_cc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Pearson r for [P, D] arrays with the zero-variance rule."""
    da = a - a.mean(axis=1, keepdims=True)
    db = b - b.mean(axis=1, keepdims=True)
    denom = np.sqrt((da * da).sum(axis=1) * (db * db).sum(axis=1))
    num = (da * db).sum(axis=1)
    out = np.zeros(a.shape[0])
    ok = denom > 0
    out[ok] = np.clip(num[ok] / denom[ok], -1.0, 1.0)
    return out


def _batched_rmse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean((a - b) ** 2, axis=1))


def _pairs(feat: np.ndarray, dimension: str, all_pairs: bool) -> tuple[np.ndarray, np.ndarray]:
    """Stacked [P, H*W] left and right maps for every pair along ``dimension``."""
    c, t = feat.shape[:2]
    maps = feat.reshape(c, t, -1)
    if dimension == "temporal":
        maps = maps.transpose(1, 0, 2)  # pair along axis 0
    n = maps.shape[0]
    if all_pairs:
        ii, jj = np.triu_indices(n, k=1)
    else:
        ii = np.arange(n - 1)
        jj = ii + 1
    left = maps[ii].reshape(-1, maps.shape[-1])
    right = maps[jj].reshape(-1, maps.shape[-1])
    return left, right


def pair_stats(feat: np.ndarray, dimension: str, normalize: bool = True,
               all_pairs: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """CC and RMSE of every pair in a single [C, T, H, W] activation."""
    if dimension not in DIMENSIONS:
        raise ValueError(f"dimension must be one of {DIMENSIONS}")
    feat = np.asarray(feat, dtype=np.float64)
    if feat.ndim != 4:
        raise ValueError(f"expected a [C, T, H, W] activation, got shape {feat.shape}")
    if normalize:
        lo, hi = feat.min(), feat.max()
        feat = (feat - lo) / (hi - lo) if hi > lo else np.zeros_like(feat)
    left, right = _pairs(feat, dimension, all_pairs)
    if left.shape[0] == 0:
        return np.zeros(0), np.zeros(0)
    return _batched_cc(left, right), _batched_rmse(left, right)


def flag_redundant(cc: np.ndarray, err: np.ndarray, cc_threshold: float, rmse_threshold: float,
                   literal_rule: bool = False) -> np.ndarray:
    if literal_rule:
        return (cc >= cc_threshold) & (err >= rmse_threshold)
    return (cc >= cc_threshold) & (err <= rmse_threshold)


@dataclass
class LayerRedundancy:
    layer: str
    dimension: str
    mean_cc: float
    mean_rmse: float
    rp: float
    n_pairs: int

    def to_dict(self) -> dict:
        return {"layer": self.layer, "dimension": self.dimension, "mean_cc": self.mean_cc,
                "mean_rmse": self.mean_rmse, "rp": self.rp, "n_pairs": self.n_pairs}


@dataclass
class RedundancyReport:
    rows: list[LayerRedundancy]
    cc_threshold: float = DEFAULT_CC_THRESHOLD
    rmse_threshold: float = DEFAULT_RMSE_THRESHOLD
    normalize: bool = True
    literal_rule: bool = False
    per_clip: list[dict] = field(default_factory=list)

    def get(self, layer: str, dimension: str) -> LayerRedundancy:
        for row in self.rows:
            if row.layer == layer and row.dimension == dimension:
                return row
        raise KeyError(f"no entry for layer {layer!r}, dimension {dimension!r}")

    def to_dict(self) -> dict:
        return {"cc_threshold": self.cc_threshold, "rmse_threshold": self.rmse_threshold,
                "normalize": self.normalize, "literal_rule": self.literal_rule,
                "layers": [r.to_dict() for r in self.rows], "per_clip": self.per_clip}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "dimension", "mean_cc", "mean_rmse", "rp"])
        for r in self.rows:
            w.writerow([r.layer, r.dimension, f"{r.mean_cc:.6f}", f"{r.mean_rmse:.6f}", f"{r.rp:.6f}"])
        return buf.getvalue()


def analyze_features(per_clip_features: Iterable[Sequence[tuple[str, np.ndarray]]],
                     cc_threshold: float = DEFAULT_CC_THRESHOLD,
                     rmse_threshold: float = DEFAULT_RMSE_THRESHOLD, normalize: bool = True,
                     all_pairs: bool = False, literal_rule: bool = False,
                     keep_per_clip: bool = False, clip_ids: Sequence[str] | None = None) -> RedundancyReport:
    """Aggregate similarity over clips.

    Each element of ``per_clip_features`` lists ``(layer_name, [C, T, H, W])``
    activations of one clip. Mean CC and RMSE are averaged per layer within a
    clip, then over clips; RP is the flagged fraction of all pairs seen.
    """
    sums: dict[tuple[str, str], list[float]] = {}
    order: list[tuple[str, str]] = []
    per_clip = []
    n_clips = 0
    for k, layers in enumerate(per_clip_features):
        n_clips += 1
        clip_rows = []
        for name, feat in layers:
            for dim in DIMENSIONS:
                cc, err = pair_stats(feat, dim, normalize, all_pairs)
                if cc.size == 0:
                    continue
                flags = flag_redundant(cc, err, cc_threshold, rmse_threshold, literal_rule)
                key = (name, dim)
                if key not in sums:
                    sums[key] = [0.0, 0.0, 0.0, 0.0, 0.0]  # cc, rmse, clips, flagged, pairs
                    order.append(key)
                acc = sums[key]
                acc[0] += float(cc.mean())
                acc[1] += float(err.mean())
                acc[2] += 1
                acc[3] += float(flags.sum())
                acc[4] += cc.size
                if keep_per_clip:
                    clip_rows.append({"layer": name, "dimension": dim, "mean_cc": float(cc.mean()),
                                      "mean_rmse": float(err.mean()), "rp": float(flags.mean())})
        if keep_per_clip:
            cid = clip_ids[k] if clip_ids is not None else str(k)
            per_clip.append({"clip_id": cid, "layers": clip_rows})
    if n_clips == 0:
        raise ValueError("cannot analyze an empty dataset")
    rows = [LayerRedundancy(name, dim, s[0] / s[2], s[1] / s[2], s[3] / s[4], int(s[4]))
            for (name, dim), s in ((key, sums[key]) for key in order)]
    return RedundancyReport(rows, cc_threshold, rmse_threshold, normalize, literal_rule, per_clip)


def analyze_clips(clips: Iterable, **kwargs) -> RedundancyReport:
    """Similarity of the raw input frames, reported under layer name ``input``."""
    return analyze_features(([("input", getattr(c, "data", c))] for c in clips), **kwargs)


def analyze(model, dataset, cc_threshold: float = DEFAULT_CC_THRESHOLD,
            rmse_threshold: float = DEFAULT_RMSE_THRESHOLD, normalize: bool = True,
            all_pairs: bool = False, literal_rule: bool = False, mode: str = "base",
            keep_per_clip: bool = False) -> RedundancyReport:
    """Capture every conv output of ``model`` on each clip and measure redundancy."""
    clips = list(dataset)
    if not clips:
        raise ValueError("cannot analyze an empty dataset")

    def features():
        for clip in clips:
            captured: list = []
            model.forward(clip.data, mode=mode, capture=captured)
            yield [(name, feat[0]) for name, feat in captured]

    return analyze_features(features(), cc_threshold, rmse_threshold, normalize, all_pairs, literal_rule,
                            keep_per_clip, [c.clip_id for c in clips])
