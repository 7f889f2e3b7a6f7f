"""Command-line entry point: summary, train, evaluate, predict, explain.

Exit codes: 0 ok, 1 parameter-count mismatch, 2 config, 3 weights, 4 data, 5 numeric.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    FRAME_SUFFIXES,
    ClipRecord,
    FileClips,
    build_clips,
    load_clip,
    load_metadata,
    pad_frame_list,
    split_dataset,
)
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    DatasetError,
    NumericError,
    ValidationError,
    WeightsFormatError,
)
from .explain import clip_overlay_strip, gradcam, heatmap_filename, spatial_layer_names, write_image
from .loop import TrainConfig, evaluate, predict_proba, train_loop
from .model import ModelConfig, build_model, load_weights, model_summary, preset
from .training import CLASS_NAMES, FAKE

log = logging.getLogger("capsnet_lstm")

EXIT_MISMATCH, EXIT_CONFIG, EXIT_WEIGHTS, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3, 4, 5


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7


@dataclass
class ExplainConfig:
    layer: str = "conv1"
    target_class: int | None = None  # None: the predicted class
    alpha: float = 0.4


@dataclass
class RunConfig:
    """One JSON document drives a run; every key is optional."""

    dataset_root: str | None = None
    seed: int = 0
    architecture: object = "paper-default"  # preset name, or {"preset": name, <overrides>}
    batch_size: int = 4
    epochs: int = 30
    test_ratio: float = 0.2
    val_ratio: float = 0.2
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights_path: str | None = None
    output_dir: str = "runs/latest"
    workers: int = 1
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def model_config(self) -> ModelConfig:
        arch = self.architecture
        if isinstance(arch, str):
            cfg = preset(arch)
        elif isinstance(arch, dict):
            overrides = dict(arch)
            name = overrides.pop("preset", "paper-default")
            if not isinstance(name, str):
                raise ConfigError("architecture.preset: must be a string")
            cfg = preset(name, **overrides)
        else:
            raise ConfigError("architecture: must be a preset name or an object")
        cfg.seed = self.seed
        return cfg

    def train_config(self) -> TrainConfig:
        o = self.optimizer
        return TrainConfig(self.epochs, self.batch_size, o.kind, o.lr, o.beta1, o.beta2, o.eps,
                           self.seed, self.workers)


def _strict(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
        kwargs[key] = value
    return kwargs


def parse_config(data: dict) -> RunConfig:
    kwargs = _strict(RunConfig, data, "")
    if "optimizer" in kwargs:
        kwargs["optimizer"] = OptimizerConfig(**_strict(OptimizerConfig, kwargs["optimizer"], "optimizer"))
    if "explain" in kwargs:
        kwargs["explain"] = ExplainConfig(**_strict(ExplainConfig, kwargs["explain"], "explain"))
    cfg = RunConfig(**kwargs)
    for name in ("seed", "batch_size", "epochs", "workers"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or (value < 1 and name != "seed"):
            raise ConfigError(f"{name}: expected a positive integer, got {value!r}")
    for name in ("lr", "beta1", "beta2", "eps"):
        value = getattr(cfg.optimizer, name)
        if not isinstance(value, (int, float)) or isinstance(value, bool) or value < 0:
            raise ConfigError(f"optimizer.{name}: expected a non-negative number, got {value!r}")
    if cfg.optimizer.kind not in ("adam", "sgd"):
        raise ConfigError(f"optimizer.kind: expected 'adam' or 'sgd', got {cfg.optimizer.kind!r}")
    cfg.model_config()  # surfaces architecture errors early
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return parse_config(data)


# ---------------------------------------------------------------------------
# commands


def _dataset(cfg: RunConfig):
    if not cfg.dataset_root:
        raise ConfigError("dataset_root: required for this command")
    mcfg = cfg.model_config()
    labels = load_metadata(cfg.dataset_root)
    clips = build_clips(cfg.dataset_root, labels, mcfg.frames)
    plan = split_dataset({c.clip_id: c.label for c in clips}, cfg.seed, cfg.test_ratio, cfg.val_ratio)
    return mcfg, {c.clip_id: c for c in clips}, plan


def _segment(clips: dict, plan, name: str, target) -> FileClips:
    ids = sorted(clips) if name == "all" else plan.segment(name)
    return FileClips([clips[i] for i in ids], target)


def _weights(cfg: RunConfig, args, mcfg: ModelConfig):
    path = args.weights or cfg.weights_path
    if not path or not Path(path).is_file():
        raise WeightsFormatError(f"weights file not found: {path}")
    return load_weights(path, mcfg)


def cmd_summary(cfg: RunConfig, args) -> int:
    model = build_model(cfg.model_config(), init=False)
    print(model_summary(model))
    if args.check_params is not None and model.param_count() != args.check_params:
        print(f"parameter count {model.param_count():,} != expected {args.check_params:,}", file=sys.stderr)
        return EXIT_MISMATCH
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    mcfg, clips, plan = _dataset(cfg)
    target = mcfg.input_shape
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights_path = Path(args.weights or cfg.weights_path or out / "weights.capw")
    model = build_model(mcfg)
    history = train_loop(model, _segment(clips, plan, "train", target), _segment(clips, plan, "validation", target),
                         cfg.train_config(), checkpoint_path=weights_path)
    history.write(out)
    (out / "split.json").write_text(json.dumps(asdict(plan), indent=1), encoding="utf-8")
    print(f"wrote {out / 'history.csv'} and {weights_path} (best epoch {history.best_epoch})")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    mcfg, clips, plan = _dataset(cfg)
    model = _weights(cfg, args, mcfg)
    result = evaluate(model, _segment(clips, plan, args.split, mcfg.input_shape), cfg.batch_size, cfg.workers)
    for name in ("loss", "accuracy", "recall", "auc"):
        value = result[name]
        print(f"{name} {'n/a' if value is None else f'{value:.6f}'}")
    return 0


def _clips_from_dirs(dirs, frames: int) -> list[ClipRecord]:
    out = []
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            raise DatasetError(f"clip directory not found: {d}")
        found = sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
        if not found:
            raise ValidationError(f"clip {d.name!r}: no frame images found")
        out.append(ClipRecord(d.name, tuple(pad_frame_list(found, frames)), "REAL"))
    return out


def _select_clips(cfg: RunConfig, args, mcfg: ModelConfig) -> list[ClipRecord]:
    if args.clip:
        return _clips_from_dirs(args.clip, mcfg.frames)
    _, clips, plan = _dataset(cfg)
    return _segment(clips, plan, args.split, mcfg.input_shape).clips


def cmd_predict(cfg: RunConfig, args) -> int:
    mcfg = cfg.model_config()
    model = _weights(cfg, args, mcfg)
    records = _select_clips(cfg, args, mcfg)
    probs = predict_proba(model, FileClips(records, mcfg.input_shape), cfg.batch_size, cfg.workers)
    for rec, p in zip(records, probs):
        label = CLASS_NAMES[int(np.argmax(p))]
        print(json.dumps({"clip_id": rec.clip_id, "label": label, "p_fake": float(p[FAKE])}))
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    mcfg = cfg.model_config()
    layer = args.layer or cfg.explain.layer
    skeleton = build_model(mcfg, init=False)
    if layer not in spatial_layer_names(skeleton):
        raise ConfigError(f"unknown or non-spatial layer {layer!r}; valid layers: "
                          f"{', '.join(spatial_layer_names(skeleton))}")
    model = _weights(cfg, args, mcfg)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = args.target_class if args.target_class is not None else cfg.explain.target_class
    for rec in _select_clips(cfg, args, mcfg):
        clip = load_clip(rec, mcfg.input_shape)
        cls = target if target is not None else int(np.argmax(model.forward(clip[None])[0]))
        heat = gradcam(model, clip, cls, layer)
        path = out / heatmap_filename(rec.clip_id, cls)
        write_image(clip_overlay_strip(heat, clip, cfg.explain.alpha), path)
        print(path)
    return 0


COMMANDS = {
    "summary": cmd_summary,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsnet-lstm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "summary":
            p.add_argument("--check-params", type=int, help="exit 1 unless the total parameter count matches")
        else:
            p.add_argument("--weights", help="weights file (written by train, read otherwise)")
            p.add_argument("--out", help="output directory")
        if name in ("evaluate", "predict", "explain"):
            p.add_argument("--split", default="test", choices=("train", "validation", "test", "all"))
        if name in ("predict", "explain"):
            p.add_argument("--clip", action="append", help="clip directory of frames (repeatable)")
        if name == "explain":
            p.add_argument("--layer", help="spatial layer to explain (default conv1)")
            p.add_argument("--class", dest="target_class", type=int, help="class index (default: predicted)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WeightsFormatError as exc:
        print(f"weights error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    except (DatasetError, DataError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
