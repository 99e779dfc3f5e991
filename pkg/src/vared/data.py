"""Synthetic moving-pattern videos, the VRED binary clip format and manifests."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import BadMagicError, ConfigError, DimOverflowError, ManifestError, TruncatedFileError

CLIP_MAGIC = b"VRED"
CLIP_VERSION = 1
MAX_DIM = 1 << 16
SHAPES = ("rect", "circle", "stripes", "ring", "cross")


@dataclass
class VideoClip:
    data: np.ndarray  # [C, T, H, W] float32 in [0, 1]
    label: int
    clip_id: str

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass
class ClassSpec:
    name: str
    motion_level: float = 0.0
    texture_complexity: float = 0.5
    shape: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.motion_level <= 1.0:
            raise ConfigError(f"class {self.name}: motion_level must be in [0, 1], got {self.motion_level}")
        if not 0.0 <= self.texture_complexity <= 1.0:
            raise ConfigError(f"class {self.name}: texture_complexity must be in [0, 1]")
        if self.shape is not None and self.shape not in SHAPES:
            raise ConfigError(f"class {self.name}: unknown shape {self.shape!r}; known {SHAPES}")


@dataclass
class SynthConfig:
    classes: list[ClassSpec]
    clips_per_class: int = 100
    dims: tuple[int, int, int, int] = (3, 8, 32, 32)
    noise_std: float = 0.02
    seed: int = 0
    max_speed: float = 10.0  # pixels per frame at motion_level 1
    max_patterns: int = 3
    palette: str = "shared"  # "shared": only the shape identifies the class; "class": colours do too
    boundary: str = "exit"  # "exit": patterns cross and leave the view; "wrap": toroidal motion

    def __post_init__(self):
        self.classes = [c if isinstance(c, ClassSpec) else ClassSpec(**c) for c in self.classes]
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 4 or any(d <= 0 for d in self.dims):
            raise ConfigError(f"dims must be four positive ints (C, T, H, W), got {self.dims}")
        if not self.classes:
            raise ConfigError("at least one class is required")
        if self.clips_per_class < 1:
            raise ConfigError("clips_per_class must be >= 1")
        if self.palette not in ("class", "shared"):
            raise ConfigError(f"palette must be 'class' or 'shared', got {self.palette!r}")
        if self.boundary not in ("wrap", "exit"):
            raise ConfigError(f"boundary must be 'wrap' or 'exit', got {self.boundary!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known - {"config_version"}
        if unknown:
            raise ConfigError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


def default_synth_config(clips_per_class: int = 100, seed: int = 0, noise_std: float = 0.02) -> SynthConfig:
    """Four classes: two static, two high-motion, each with its own shape.

    Fast patterns cross the view in a few frames, so skipping frames can miss
    them, while static clips lose nothing when frames are skipped.
    """
    return SynthConfig(
        classes=[
            ClassSpec("static_rect", 0.0, 0.5, "rect"),
            ClassSpec("static_circle", 0.0, 0.5, "circle"),
            ClassSpec("moving_stripes", 1.0, 0.5, "stripes"),
            ClassSpec("moving_cross", 1.0, 0.5, "cross"),
        ],
        clips_per_class=clips_per_class, noise_std=noise_std, seed=seed)


def _palette(label: int, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic per-class foreground and background colours."""
    rng = np.random.default_rng(10_007 + label)
    fg = rng.uniform(0.55, 1.0, channels)
    bg = rng.uniform(0.0, 0.3, channels)
    return fg, bg


def _mask(shape: str, yy: np.ndarray, xx: np.ndarray, size: float) -> np.ndarray:
    """Boolean mask of a pattern centred at the origin of the (toroidal) offsets yy, xx."""
    if shape == "rect":
        return (np.abs(yy) <= size * 0.8) & (np.abs(xx) <= size * 0.5)
    if shape == "circle":
        return yy ** 2 + xx ** 2 <= size ** 2
    if shape == "ring":
        r2 = yy ** 2 + xx ** 2
        return (r2 <= size ** 2) & (r2 >= (size * 0.55) ** 2)
    if shape == "stripes":
        inside = (np.abs(yy) <= size) & (np.abs(xx) <= size)
        return inside & ((np.floor((xx + size) / 2) % 2) == 0)
    if shape == "cross":
        w = max(size * 0.3, 1.0)
        return ((np.abs(yy) <= w) & (np.abs(xx) <= size)) | ((np.abs(xx) <= w) & (np.abs(yy) <= size))
    raise ConfigError(f"unknown shape {shape!r}")


def render_clip(cls: ClassSpec, label: int, dims, rng: np.random.Generator, noise_std: float,
                max_speed: float, max_patterns: int, palette: str = "class",
                boundary: str = "wrap") -> np.ndarray:
    c, t, h, w = dims
    shape = cls.shape or SHAPES[label % len(SHAPES)]
    if palette == "class":
        fg, bg = _palette(label, c)
    else:
        fg, bg = rng.uniform(0.55, 1.0, c), rng.uniform(0.0, 0.3, c)
    n_patterns = 1 + int(round(cls.texture_complexity * (max_patterns - 1)))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    video = np.empty((c, t, h, w), dtype=np.float64)
    video[:] = bg.reshape(c, 1, 1, 1)
    speed = cls.motion_level * max_speed
    for _ in range(n_patterns):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        theta = rng.uniform(0, 2 * np.pi)
        vy, vx = speed * np.sin(theta), speed * np.cos(theta)
        size = rng.uniform(0.15, 0.22) * min(h, w)
        shade = rng.uniform(0.85, 1.0)
        # frame at which the pattern sits at (cy, cx)
        t0 = rng.uniform(0, t - 1) if boundary == "exit" else 0.0
        for f in range(t):
            py, px = cy + vy * (f - t0), cx + vx * (f - t0)
            if boundary == "wrap":
                # toroidal distance keeps every pattern fully visible
                dy = (ys - py + h / 2) % h - h / 2
                dx = (xs - px + w / 2) % w - w / 2
            else:
                dy, dx = ys - py, xs - px
            m = _mask(shape, dy, dx, size)
            for ch in range(c):
                video[ch, f][m] = fg[ch] * shade
    if noise_std > 0:
        video += rng.normal(0.0, noise_std, video.shape)
    return np.clip(video, 0.0, 1.0).astype(np.float32)


def synth_generate(cfg: SynthConfig) -> list[VideoClip]:
    """Balanced dataset, clips ordered by class then index; deterministic per seed."""
    clips = []
    for label, cls in enumerate(cfg.classes):
        for k in range(cfg.clips_per_class):
            rng = np.random.default_rng([cfg.seed, label, k])
            data = render_clip(cls, label, cfg.dims, rng, cfg.noise_std, cfg.max_speed, cfg.max_patterns,
                               cfg.palette, cfg.boundary)
            clips.append(VideoClip(data, label, f"{cls.name}_{k:04d}"))
    return clips


# ----------------------------------------------------------------- clip IO

def save_clip(path: str | Path, clip: VideoClip | np.ndarray) -> None:
    data = clip.data if isinstance(clip, VideoClip) else clip
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim != 4:
        raise DimOverflowError(f"clip must be 4-D (C, T, H, W), got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(struct.pack("<5I", CLIP_VERSION, *data.shape))
        fh.write(data.tobytes())


def load_clip(path: str | Path, label: int = -1, clip_id: str | None = None) -> VideoClip:
    raw = Path(path).read_bytes()
    if raw[:4] != CLIP_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {CLIP_MAGIC!r}")
    if len(raw) < 24:
        raise TruncatedFileError(f"{path}: header needs 24 bytes, file has {len(raw)}")
    version, *dims = struct.unpack("<5I", raw[4:24])
    if version != CLIP_VERSION:
        raise BadMagicError(f"{path}: unsupported clip version {version}")
    if any(d == 0 or d > MAX_DIM for d in dims):
        raise DimOverflowError(f"{path}: dims {dims} outside 1..{MAX_DIM}")
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    payload = raw[24:]
    if len(payload) != expected:
        raise TruncatedFileError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return VideoClip(data, label, clip_id or Path(path).stem)


# ---------------------------------------------------------------- manifests

@dataclass
class Dataset:
    clips: list[VideoClip]
    classes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self) -> Iterator[VideoClip]:
        return iter(self.clips)

    def __getitem__(self, i):
        return self.clips[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.clips[0].dims

    def batch(self, idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        return (np.stack([self.clips[i].data for i in idx]),
                np.array([self.clips[i].label for i in idx], dtype=np.int64))


def write_dataset(clips: Sequence[VideoClip], out_dir: str | Path, classes: Sequence[str]) -> Path:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    items = []
    for clip in clips:
        rel = f"clips/{clip.clip_id}.vred"
        save_clip(out / rel, clip)
        items.append({"file": rel, "label": classes[clip.label], "clip_id": clip.clip_id})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"classes": list(classes), "items": items}, indent=2))
    return manifest


def load_manifest(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    classes = list(doc.get("classes", []))
    clips = []
    first = None
    for item in doc.get("items", []):
        f = path.parent / item["file"]
        if not f.exists():
            raise ManifestError(f"missing clip file: {f}")
        label = item["label"]
        if isinstance(label, str):
            if label not in classes:
                raise ManifestError(f"{item['file']}: unknown label {label!r}")
            label = classes.index(label)
        elif not 0 <= int(label) < len(classes):
            raise ManifestError(f"{item['file']}: unknown label {label!r}")
        clip = load_clip(f, int(label), item.get("clip_id"))
        if first is None:
            first = clip.dims
        elif clip.dims != first:
            raise ManifestError(f"{item['file']}: dim mismatch {clip.dims} vs first clip {first}")
        clips.append(clip)
    return Dataset(clips, classes)
