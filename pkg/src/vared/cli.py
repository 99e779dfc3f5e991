"""Command-line entry point: ``vared <command> [options]``.

Exit codes: 0 ok, 2 configuration or usage error, 3 I/O error, 4 training
divergence. Logs go to stderr; results only to the files named on the command
line (``flops`` prints its numbers to stdout).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, SynthConfig, load_manifest, synth_generate, write_dataset
from .errors import ClipFormatError, ConfigError, DivergenceError, ManifestError, SpecError
from .models import Model, ModelSpec, get_spec, model_flops
from .redundancy import DEFAULT_CC_THRESHOLD, DEFAULT_RMSE_THRESHOLD, analyze
from .training import EvalResult, TrainConfig, evaluate, export_policy_stats, finetune_efficiency, train_joint

log = logging.getLogger("vared")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
CONFIG_VERSION = 1
CKPT_NAME = "model.ckpt"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ config

def read_json(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _check_version(doc: dict, path) -> None:
    version = doc.get("config_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: unsupported config_version {version!r} (expected {CONFIG_VERSION})")


@dataclass
class RunConfig:
    manifest: str
    arch: str = "toy3d"
    frames: int | None = None
    res: int | None = None
    model_seed: int = 0
    spec: dict | None = None  # inline ModelSpec; overrides arch/frames/res
    train: TrainConfig = field(default_factory=TrainConfig)
    config_version: int = CONFIG_VERSION

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        doc = read_json(path)
        _check_version(doc, path)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        if "manifest" not in doc:
            raise ConfigError(f"{path}: 'manifest' is required")
        doc = dict(doc)
        train = doc.pop("train", {})
        if not isinstance(train, dict):
            raise ConfigError(f"{path}: 'train' must be an object")
        try:
            cfg = cls(**doc, train=TrainConfig.from_dict(train))
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        manifest = Path(cfg.manifest)
        if not manifest.is_absolute():
            cfg.manifest = str(Path(path).parent / manifest)
        return cfg

    def model_spec(self, num_classes: int) -> ModelSpec:
        if self.spec is not None:
            return ModelSpec.from_dict(self.spec)
        return get_spec(self.arch, self.frames, self.res, num_classes=num_classes)


# ------------------------------------------------------------ checkpoints

def save_model(path: Path, model: Model, phase: str, extra: dict | None = None) -> None:
    meta = {"spec": model.spec.to_dict(), "phase": phase, "version": __version__}
    meta.update(extra or {})
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path: str | Path) -> tuple[Model, dict]:
    arrays, meta = load_checkpoint(path)
    if "spec" not in meta:
        raise ConfigError(f"{path}: checkpoint has no model spec")
    model = Model(ModelSpec.from_dict(meta["spec"]), seed=meta.get("model_seed", 0))
    model.load_state_dict(arrays)
    return model, meta


def _threads() -> int:
    raw = os.environ.get("VARED_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"VARED_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"VARED_THREADS must be a positive integer, got {raw!r}")
    return n


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# --------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    doc = read_json(args.config)
    _check_version(doc, args.config)
    cfg = SynthConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    clips = synth_generate(cfg)
    manifest = write_dataset(clips, args.out, [c.name for c in cfg.classes])
    print(f"wrote {len(clips)} clips ({len(cfg.classes)} classes, dims {cfg.dims}) to {manifest}")
    return EXIT_OK


def _load_run(args) -> tuple[RunConfig, Dataset]:
    cfg = RunConfig.load(args.config)
    if getattr(args, "epochs", None) is not None:
        if args.epochs < 0:
            raise ConfigError("--epochs must be >= 0")
        if args.command == "train":
            cfg.train.epochs_joint = args.epochs
        else:
            cfg.train.epochs_finetune = args.epochs
    return cfg, load_manifest(cfg.manifest)


def _write_history(path: Path, history: list[dict], append: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    cfg, ds = _load_run(args)
    out = Path(args.out)
    if args.ckpt:
        model, meta = load_model(args.ckpt)
        log.info("resuming from %s (phase %s)", args.ckpt, meta.get("phase"))
    else:
        model = Model(cfg.model_spec(len(ds.classes)), seed=cfg.model_seed)
    out.mkdir(parents=True, exist_ok=True)
    history = train_joint(model, ds, cfg.train)
    phase = "joint" if cfg.train.epochs_joint > 0 or args.ckpt else "init"
    save_model(out / CKPT_NAME, model, phase, {"model_seed": cfg.model_seed, "train": cfg.train.to_dict()})
    _write_history(out / "history.jsonl", [dict(r, phase="joint") for r in history], append=False)
    log.info("checkpoint written to %s", out / CKPT_NAME)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, ds = _load_run(args)
    model, meta = load_model(args.ckpt)
    if meta.get("phase") == "init":
        log.warning("finetuning an untrained checkpoint (%s); efficiency finetuning expects a jointly "
                    "trained model", args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history = finetune_efficiency(model, ds, cfg.train)
    save_model(out / CKPT_NAME, model, "finetune",
               {"model_seed": meta.get("model_seed", 0), "train": cfg.train.to_dict()})
    same_dir = Path(args.ckpt).resolve().parent == out.resolve()
    _write_history(out / "history.jsonl", [dict(r, phase="finetune") for r in history], append=same_dir)
    return EXIT_OK


def _dataset_for(model: Model, manifest: str) -> Dataset:
    ds = load_manifest(manifest)
    if ds.clips and ds.dims != model.spec.input:
        raise ConfigError(f"clips have dims {ds.dims} but the model expects {model.spec.input}")
    return ds


def cmd_eval(args) -> int:
    model, _ = load_model(args.ckpt)
    ds = _dataset_for(model, args.manifest)
    result = evaluate(model, ds, eps_active=args.eps, force="full" if args.force_full else None,
                      workers=_threads())
    _write(Path(args.out), result.to_json() + "\n")
    log.info("accuracy %.4f mean GFLOPs %.6f", result.accuracy, result.mean_gflops)
    return EXIT_OK


def _trace_gflops(path: str) -> list[float]:
    doc = json.loads(Path(path).read_text())
    items = doc.get("per_instance", []) if isinstance(doc, dict) else doc
    values = []
    for item in items:
        if "gflops" in item:
            values.append(float(item["gflops"]))
        elif "flops" in item:
            values.append(float(item["flops"]) / 1e9)
        else:
            raise ConfigError(f"{path}: trace entries need 'gflops' or 'flops'")
    if not values:
        raise ConfigError(f"{path}: trace holds no instances")
    return values


def cmd_flops(args) -> int:
    spec = get_spec(args.arch, args.frames, args.res)
    static = model_flops(spec, strict=args.strict) / 1e9
    print(f"{spec.name} frames={spec.input[1]} res={spec.input[2]} static_gflops={static:.6f}")
    if args.trace:
        v = np.array(_trace_gflops(args.trace))
        print(f"realized_gflops avg={v.mean():.6f} max={v.max():.6f} min={v.min():.6f} n={v.size}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.ckpt:
        model, _ = load_model(args.ckpt)
    else:
        model = Model(get_spec(args.arch, args.frames, args.res), seed=args.seed)
    ds = _dataset_for(model, args.manifest)
    if len(ds) == 0:
        raise ConfigError("manifest lists no clips")
    report = analyze(model, ds, args.cc_threshold, args.rmse_threshold, normalize=not args.no_normalize,
                     all_pairs=args.all_pairs, literal_rule=args.literal_rule)
    out = Path(args.out)
    _write(out / "redundancy.json", report.to_json() + "\n")
    _write(out / "redundancy.csv", report.to_csv())
    return EXIT_OK


def cmd_export_policy(args) -> int:
    if args.eval_json:
        result = EvalResult(**read_json(args.eval_json))
    else:
        if not (args.ckpt and args.manifest):
            raise UsageError("export-policy needs --eval-json or both --ckpt and --manifest")
        model, _ = load_model(args.ckpt)
        result = evaluate(model, _dataset_for(model, args.manifest), eps_active=args.eps, workers=_threads())
    heatmap, instances = export_policy_stats(result)
    out = Path(args.out)
    _write(out / "policy_heatmap.csv", heatmap)
    _write(out / "instance_costs.json", instances + "\n")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vared", description="Input-adaptive redundancy reduction for video CNNs.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="joint training of weights and gates")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="override train.epochs_joint")
    t.add_argument("--ckpt", help="resume from this checkpoint")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="efficiency-loss finetuning")
    f.add_argument("--config", required=True)
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--epochs", type=int, help="override train.epochs_finetune")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="single-clip dynamic evaluation")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True, help="EvalResult JSON path")
    e.add_argument("--eps", type=float, default=0.0, help="activity threshold for gate weights")
    e.add_argument("--force-full", action="store_true", help="override every gate with full compute")
    e.set_defaults(func=cmd_eval)

    fl = sub.add_parser("flops", help="static (and realized) GFLOPs of an architecture")
    fl.add_argument("--arch", required=True)
    fl.add_argument("--frames", type=int)
    fl.add_argument("--res", type=int)
    fl.add_argument("--trace", help="eval JSON or per-instance cost list")
    fl.add_argument("--strict", action="store_true", help="count a multiply-add as two FLOPs")
    fl.set_defaults(func=cmd_flops)

    a = sub.add_parser("analyze", help="feature-map redundancy report")
    a.add_argument("--manifest", required=True)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--ckpt")
    a.add_argument("--arch", default="toy3d")
    a.add_argument("--frames", type=int)
    a.add_argument("--res", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--cc-threshold", type=float, default=DEFAULT_CC_THRESHOLD)
    a.add_argument("--rmse-threshold", type=float, default=DEFAULT_RMSE_THRESHOLD)
    a.add_argument("--all-pairs", action="store_true")
    a.add_argument("--literal-rule", action="store_true",
                   help="flag pairs whose CC and RMSE are both at or above the thresholds")
    a.add_argument("--no-normalize", action="store_true")
    a.set_defaults(func=cmd_analyze)

    x = sub.add_parser("export-policy", help="per-class compute-ratio heatmap and per-clip costs")
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--eval-json")
    x.add_argument("--ckpt")
    x.add_argument("--manifest")
    x.add_argument("--eps", type=float, default=0.0)
    x.set_defaults(func=cmd_export_policy)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGED
    except (ConfigError, SpecError, UsageError, ManifestError, ClipFormatError) as exc:
        log.error("%s", exc)
        return EXIT_IO if isinstance(exc, (ManifestError, ClipFormatError)) else EXIT_CONFIG
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
