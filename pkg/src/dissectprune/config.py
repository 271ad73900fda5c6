"""Experiment configuration: YAML schema, defaults and validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .concept_data import BASIC_COLORS, MAX_SHADING, SHAPES, TEXTURES, MicroBrodenSpec
from .model import ModelSpec
from .trainer import TrainingSchedule

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised with every violation found; ``errors`` holds (field path, message) pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass
class DataConfig:
    path: str | None = None
    split: str | None = None
    image_size: tuple[int, int] = (32, 32)
    n_images: dict[str, int] = field(default_factory=lambda: {"dissect": 200})
    palette: list[str] = field(default_factory=lambda: ["red", "green", "blue", "yellow", "white", "black"])
    shapes: list[str] = field(default_factory=lambda: ["square", "disk", "triangle", "cross"])
    textures: list[str] = field(default_factory=lambda: ["solid", "stripes", "checker"])
    backgrounds: list[str] = field(default_factory=lambda: ["gray"])
    radius_range: tuple[float, float] = (0.14, 0.24)
    shading: float = 0.1
    seed: int = 0

    def micro_broden(self) -> MicroBrodenSpec:
        return MicroBrodenSpec(tuple(self.image_size), dict(self.n_images), tuple(self.palette),
                               tuple(self.shapes), tuple(self.textures), self.seed,
                               tuple(self.radius_range), tuple(self.backgrounds), self.shading)


@dataclass
class TaskConfig:
    n_train: int = 2000
    n_test: int = 1000
    noise: float = 0.1
    seed: int = 1


@dataclass
class ModelConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    blocks: list[int] = field(default_factory=lambda: [1, 1, 1])
    dissection_layers: list[str] | None = None


@dataclass
class TrainingConfig:
    epochs: int = 12
    lr: float = 0.05
    decay_factor: float = 10.0
    decay_epochs: list[int] = field(default_factory=lambda: [8, 10])
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class PruningConfig:
    fraction: float = 0.2
    scope: str = "global"
    rounds: int = 12
    mode: str = "rewind"
    rewind_epoch: int = 1
    replay: str | int = "full"
    finetune_epochs: int = 2


@dataclass
class DissectionConfig:
    iou_threshold: float = 0.05
    iou_table: bool = False


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    output_root: str = "runs/experiment"
    seeds: list[int] = field(default_factory=lambda: [0])
    data: DataConfig = field(default_factory=DataConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pruning: PruningConfig = field(default_factory=PruningConfig)
    dissection: DissectionConfig = field(default_factory=DissectionConfig)

    def model_spec(self) -> ModelSpec:
        size = tuple(self.data.image_size)
        layers = tuple(self.model.dissection_layers) if self.model.dissection_layers else None
        return ModelSpec(size, 3, tuple(self.model.widths), tuple(self.model.blocks),
                         len(self.data.shapes), layers)

    def schedule(self, seed: int) -> TrainingSchedule:
        t = self.training
        return TrainingSchedule(t.epochs, t.lr, t.decay_factor, tuple(t.decay_epochs), t.batch_size,
                                t.momentum, t.weight_decay, seed)

    @property
    def replay_epochs(self) -> int | None:
        return None if self.pruning.replay == "full" else int(self.pruning.replay)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def digest(self, exclude=("output_root",)) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "data": DataConfig,
    "task": TaskConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "pruning": PruningConfig,
    "dissection": DissectionConfig,
}


def _build(cls, raw, path, errors):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append((path, "expected a mapping"))
        return cls()
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            errors.append((f"{path}.{key}" if path else key, "unknown field"))
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in _SECTIONS and cls is ExperimentConfig:
            kwargs[f.name] = _build(_SECTIONS[f.name], raw[f.name], sub, errors)
        else:
            kwargs[f.name] = raw[f.name]
    return cls(**{k: v for k, v in kwargs.items() if k in known})


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def check(cfg: ExperimentConfig, base_dir=None) -> list[tuple[str, str]]:
    """All constraint violations in ``cfg`` as (field path, message)."""
    errors: list[tuple[str, str]] = []

    def need(ok, path, msg):
        if not ok:
            errors.append((path, msg))

    need(cfg.schema_version == SCHEMA_VERSION, "schema_version", f"must be {SCHEMA_VERSION}")
    need(isinstance(cfg.output_root, str) and cfg.output_root != "", "output_root", "must be a non-empty path")
    need(isinstance(cfg.seeds, list) and cfg.seeds and all(_is_int(s) and s >= 0 for s in cfg.seeds),
         "seeds", "must be a non-empty list of non-negative integers")
    if isinstance(cfg.seeds, list):
        need(len(set(map(str, cfg.seeds))) == len(cfg.seeds), "seeds", "must be unique")

    d = cfg.data
    if d.path is not None:
        p = Path(d.path) if base_dir is None or Path(d.path).is_absolute() else Path(base_dir) / d.path
        need((p / "index.csv").is_file() and (p / "concepts.csv").is_file(), "data.path",
             f"no concept dataset at {p}")
    size_ok = isinstance(d.image_size, (list, tuple)) and len(d.image_size) == 2 and all(
        _is_int(v) and v >= 8 for v in d.image_size)
    need(size_ok, "data.image_size", "must be two integers >= 8")
    need(isinstance(d.n_images, dict) and d.n_images and all(_is_int(v) and v > 0 for v in d.n_images.values()),
         "data.n_images", "must map split names to positive counts")
    need(isinstance(d.palette, list) and len(d.palette) >= 2 and all(c in BASIC_COLORS for c in d.palette),
         "data.palette", f"must list at least two of {sorted(BASIC_COLORS)}")
    need(isinstance(d.shapes, list) and len(d.shapes) >= 2 and all(s in SHAPES for s in d.shapes),
         "data.shapes", f"must list at least two of {list(SHAPES)}")
    need(isinstance(d.textures, list) and d.textures and all(t in TEXTURES for t in d.textures),
         "data.textures", f"must list some of {list(TEXTURES)}")
    need(isinstance(d.backgrounds, list) and all(c in BASIC_COLORS for c in d.backgrounds),
         "data.backgrounds", f"must list colors from {sorted(BASIC_COLORS)}")
    rr = d.radius_range
    need(isinstance(rr, (list, tuple)) and len(rr) == 2 and all(_is_num(v) for v in rr) and 0 < rr[0] <= rr[1] < 0.5,
         "data.radius_range", "must be [lo, hi] with 0 < lo <= hi < 0.5")
    need(_is_num(d.shading) and 0 <= d.shading <= MAX_SHADING, "data.shading", f"must be in [0, {MAX_SHADING}]")
    need(_is_int(d.seed), "data.seed", "must be an integer")

    t = cfg.task
    need(_is_int(t.n_train) and t.n_train > 0, "task.n_train", "must be a positive integer")
    need(_is_int(t.n_test) and t.n_test > 0, "task.n_test", "must be a positive integer")
    need(_is_num(t.noise) and t.noise >= 0, "task.noise", "must be >= 0")
    need(_is_int(t.seed), "task.seed", "must be an integer")

    m = cfg.model
    need(isinstance(m.widths, list) and m.widths and all(_is_int(w) and w > 0 for w in m.widths),
         "model.widths", "must be positive integers")
    need(isinstance(m.blocks, list) and len(m.blocks) == len(m.widths or []) and all(_is_int(b) and b > 0 for b in m.blocks),
         "model.blocks", "must be positive integers, one per width")
    if not any(p.startswith("model.") for p, _ in errors) and size_ok:
        try:
            cfg.model_spec().validate()
        except ValueError as exc:
            errors.append(("model.dissection_layers", str(exc)))

    tr = cfg.training
    need(_is_int(tr.epochs) and tr.epochs >= 1, "training.epochs", "must be an integer >= 1")
    need(_is_num(tr.lr) and tr.lr > 0, "training.lr", "must be > 0")
    need(_is_num(tr.decay_factor) and tr.decay_factor > 0, "training.decay_factor", "must be > 0")
    de = tr.decay_epochs
    need(isinstance(de, list) and all(_is_int(e) for e in de)
         and all(b > a for a, b in zip(de, de[1:])) and all(0 <= e < (tr.epochs if _is_int(tr.epochs) else 0) for e in de),
         "training.decay_epochs", "must be strictly increasing epochs in [0, epochs)")
    need(_is_int(tr.batch_size) and tr.batch_size > 0, "training.batch_size", "must be a positive integer")
    need(_is_num(tr.momentum) and 0 <= tr.momentum < 1, "training.momentum", "must be in [0, 1)")
    need(_is_num(tr.weight_decay) and tr.weight_decay >= 0, "training.weight_decay", "must be >= 0")

    p = cfg.pruning
    need(_is_num(p.fraction) and 0 < p.fraction < 1, "pruning.fraction", "must be in (0, 1)")
    need(p.scope in ("global", "layer"), "pruning.scope", "must be 'global' or 'layer'")
    need(_is_int(p.rounds) and p.rounds >= 1, "pruning.rounds", "must be an integer >= 1")
    need(p.mode in ("rewind", "standard-finetune"), "pruning.mode", "must be 'rewind' or 'standard-finetune'")
    need(_is_int(p.rewind_epoch) and 0 <= p.rewind_epoch <= (tr.epochs if _is_int(tr.epochs) else -1),
         "pruning.rewind_epoch", "must lie in [0, training.epochs]")
    need(p.replay == "full" or (_is_int(p.replay) and p.replay >= 0), "pruning.replay",
         "must be 'full' or a non-negative epoch count")
    need(_is_int(p.finetune_epochs) and p.finetune_epochs >= 0, "pruning.finetune_epochs", "must be >= 0")

    ds = cfg.dissection
    need(_is_num(ds.iou_threshold) and 0 <= ds.iou_threshold < 1, "dissection.iou_threshold", "must be in [0, 1)")
    need(isinstance(ds.iou_table, bool), "dissection.iou_table", "must be a boolean")
    return errors


def from_dict(raw, base_dir=None) -> ExperimentConfig:
    errors: list[tuple[str, str]] = []
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "expected a mapping at top level")])
    try:
        cfg = _build(ExperimentConfig, raw, "", errors)
    except TypeError as exc:
        raise ConfigError([("<root>", str(exc))]) from None
    errors.extend(check(cfg, base_dir))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate_config(path) -> ExperimentConfig:
    """Parse and validate a YAML config; raises ``ConfigError`` listing every problem."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([(str(path), f"cannot read: {exc}")]) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError([(where, f"parse error: {getattr(exc, 'problem', exc)}")]) from None
    return from_dict(raw if raw is not None else {}, base_dir=path.parent)
