"""Run configuration: a flat YAML mapping with one level of nested blocks, plus CLI overrides."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Any, Sequence

import yaml

from ..methods.models import METHOD_KINDS

DETECTION_KINDS = ("yolo", "yolomaml")
ALL_METHODS = METHOD_KINDS + DETECTION_KINDS


class ConfigError(ValueError):
    """Invalid configuration file, key, value or combination."""


@dataclass
class DatasetBlock:
    kind: str = "glyphs"  # glyphs | directory | shapes
    path: str | None = None
    n_classes: int | None = None  # None: 80 glyph classes, 3 shape classes
    samples_per_class: int = 24
    image_size: int | None = None  # None: 28 for glyphs, 64 for shapes
    seed: int | None = None  # None: derived from the run seed
    split: tuple[float, float, float] = (0.625, 0.125, 0.25)
    n_images: int = 800  # shapes only
    max_objects: int = 3  # shapes only


@dataclass
class BackboneBlock:
    block_count: int = 4
    channels: int = 64


@dataclass
class DetectionBlock:
    n_test_images: int = 200
    batch_size: int = 16
    conf_threshold: float = 0.25
    iou_threshold: float = 0.5
    alpha: float = 1e-3
    beta: float = 1e-3
    n_episodes: int = 4
    n_updates_per_task: int = 2
    pretrain_epochs: int = 10
    outer_optimizer: str = "adam"
    reduce: str = "sum"


@dataclass
class RunConfig:
    """Every value that parameterizes one experiment."""

    method: str = "proto"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    backbone: BackboneBlock = field(default_factory=BackboneBlock)
    detection: DetectionBlock = field(default_factory=DetectionBlock)
    n_way_train: int = 5
    n_way_eval: int = 5
    k_shot: int = 1
    q_queries: int = 16
    augmentation: bool = False
    epochs: int = 30
    episodes_per_epoch: int = 100
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    selection: str = "best"
    n_val_tasks: int = 100
    n_eval_tasks: int = 600
    m_swaps_train: int = 0
    m_swaps_eval: int = 0
    seed: int = 10
    eval_seed: int | None = None
    output_dir: str = "runs"
    time_limit: float = 7200.0
    batch_size: int = 16
    inner_lr: float = 0.1
    inner_steps: int = 2
    first_order: bool = False
    matching_scale: float = 10.0
    #: relation-score objective; only "softmax" (cross-entropy) is implemented, "mse" is reserved
    relation_loss: str = "softmax"
    finetune_steps: int = 100

    @property
    def resolved_eval_seed(self) -> int:
        return self.seed if self.eval_seed is None else self.eval_seed

    @property
    def is_detection(self) -> bool:
        return self.method in DETECTION_KINDS

    def validate(self) -> "RunConfig":
        if self.method not in ALL_METHODS:
            raise ConfigError(f"method must be one of {ALL_METHODS}, got {self.method!r}")
        if self.dataset.kind not in ("glyphs", "directory", "shapes"):
            raise ConfigError(f"dataset.kind must be glyphs, directory or shapes, got {self.dataset.kind!r}")
        if self.is_detection != (self.dataset.kind == "shapes"):
            raise ConfigError("detection methods (yolo, yolomaml) require dataset.kind: shapes and vice versa")
        shapes = self.dataset.kind == "shapes"
        if self.dataset.n_classes is None and self.dataset.kind != "directory":
            self.dataset.n_classes = 3 if shapes else 80
        if self.dataset.image_size is None and self.dataset.kind != "directory":
            self.dataset.image_size = 64 if shapes else 28
        if self.dataset.kind == "directory" and not self.dataset.path:
            raise ConfigError("dataset.kind: directory requires dataset.path")
        if self.method == "maml" and self.n_way_train != self.n_way_eval:
            raise ConfigError(
                "constraint violated: n_way_train must equal n_way_eval for maml "
                f"(got {self.n_way_train} and {self.n_way_eval}); MAML cannot change the number of labels"
            )
        positive = ("n_way_train", "n_way_eval", "k_shot", "q_queries", "n_eval_tasks", "n_val_tasks",
                    "batch_size", "inner_steps")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("n_way_train", "n_way_eval"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2, got {getattr(self, name)}")
        for name in ("epochs", "episodes_per_epoch", "m_swaps_train", "m_swaps_eval", "finetune_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.selection not in ("best", "last"):
            raise ConfigError(f"selection must be best or last, got {self.selection!r}")
        if self.relation_loss == "mse":
            raise ConfigError("relation_loss: mse (sigmoid scores against one-hot targets) is not implemented; use softmax")
        if self.relation_loss != "softmax":
            raise ConfigError(f"relation_loss must be softmax, got {self.relation_loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.learning_rate < 0 or self.time_limit <= 0:
            raise ConfigError("learning_rate must be >= 0 and time_limit > 0")
        split = self.dataset.split
        if len(split) != 3 or min(split) <= 0 or abs(sum(split) - 1) > 1e-6:
            raise ConfigError(f"dataset.split must be three positive fractions summing to 1, got {list(split)}")
        if self.seed < 0 or (self.eval_seed is not None and self.eval_seed < 0):
            raise ConfigError("seeds must be non-negative integers")
        d = self.detection
        if not (0 < d.conf_threshold < 1 and 0 < d.iou_threshold < 1):
            raise ConfigError("detection thresholds must lie in (0, 1)")
        if d.alpha <= 0 or d.beta <= 0 or d.n_updates_per_task < 1 or d.n_episodes < 1:
            raise ConfigError("detection.alpha/beta must be > 0 and n_updates_per_task/n_episodes >= 1")
        if d.reduce not in ("sum", "mean") or d.outer_optimizer not in ("adam", "sgd"):
            raise ConfigError("detection.reduce must be sum|mean and detection.outer_optimizer adam|sgd")
        return self

    # -- serialization ----------------------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                v = {bf.name: _plain(getattr(v, bf.name)) for bf in fields(v)}
            out[f.name] = _plain(v)
        return out

    def echo(self) -> str:
        """Canonical YAML text of the fully resolved configuration."""
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def config_hash(self) -> str:
        """Identity of the experiment; where its outputs go does not change it."""
        data = self.to_dict()
        data.pop("output_dir")
        return hashlib.sha256(yaml.safe_dump(data, sort_keys=True).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "RunConfig":
        """Copy with top-level or ``block.key`` changes, re-validated."""
        data = self.to_dict()
        for key, value in changes.items():
            _assign(data, key, value, line=None)
        return from_dict(data)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


BLOCKS = {"dataset": DatasetBlock, "backbone": BackboneBlock, "detection": DetectionBlock}


def _field_types(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in fields(cls)}


def _coerce(name: str, type_name: str, value: Any, line: int | None):
    where = f" (line {line})" if line else ""
    optional = "None" in type_name
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{name}{where}: a value is required")
    base = type_name.replace(" | None", "")
    if base == "bool":
        if isinstance(value, bool):
            return value
    elif base == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif base == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif base == "str":
        if isinstance(value, (str, int, float)) and not isinstance(value, bool):
            return str(value)
    elif base.startswith("tuple"):
        if isinstance(value, (list, tuple)) and all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
        ):
            return tuple(float(x) for x in value)
    raise ConfigError(f"{name}{where}: expected {base}, got {value!r}")


def _assign(data: dict, key: str, value, line: int | None) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        data[key] = value
    elif len(parts) == 2 and parts[0] in BLOCKS:
        block = data.setdefault(parts[0], {})
        if not isinstance(block, dict):
            raise ConfigError(f"{parts[0]} must be a block of key: value pairs")
        block[parts[1]] = value
    else:
        raise ConfigError(f"unknown config key {key!r}")


def from_dict(data: dict, lines: dict[str, int] | None = None) -> RunConfig:
    """Build and validate a RunConfig; unknown keys are rejected by name."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of key: value pairs")
    lines = lines or {}
    top = _field_types(RunConfig)
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        line = lines.get(str(key))
        where = f" (line {line})" if line else ""
        if not isinstance(key, str) or key not in top:
            raise ConfigError(f"unknown config key {key!r}{where}")
        if key in BLOCKS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}{where}: expected a block of key: value pairs")
            types = _field_types(BLOCKS[key])
            sub = {}
            for bk, bv in value.items():
                bline = lines.get(f"{key}.{bk}")
                bwhere = f" (line {bline})" if bline else ""
                if not isinstance(bk, str) or bk not in types:
                    raise ConfigError(f"unknown config key {key}.{bk}{bwhere}")
                if isinstance(bv, dict):
                    raise ConfigError(f"{key}.{bk}{bwhere}: blocks cannot be nested more than one level")
                sub[bk] = _coerce(f"{key}.{bk}", types[bk], bv, bline)
            kwargs[key] = BLOCKS[key](**sub)
        else:
            kwargs[key] = _coerce(key, top[key], value, line)
    if "method" not in kwargs:
        raise ConfigError("config must name a method")
    return RunConfig(**kwargs).validate()


def _key_lines(text: str) -> dict[str, int]:
    """1-based line numbers of top-level and block keys."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    out: dict[str, int] = {}
    if not isinstance(node, yaml.MappingNode):
        return out
    for k, v in node.value:
        if not isinstance(k, yaml.ScalarNode):
            continue
        out[k.value] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for bk, _ in v.value:
                if isinstance(bk, yaml.ScalarNode):
                    out[f"{k.value}.{bk.value}"] = bk.start_mark.line + 1
    return out


def parse_config_text(text: str, overrides: Sequence[str] | dict | None = None) -> RunConfig:
    """Parse YAML text, apply overrides last, fill defaults and validate."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"line {mark.line + 1}: " if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc).splitlines()[0]
        raise ConfigError(f"malformed config, {line}{problem}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("line 1: configuration must be a mapping of key: value pairs")
    lines = _key_lines(text)
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    for key, value in _override_items(overrides):
        _assign(data, key, value, None)
    return from_dict(data, lines)


def parse_config(path, overrides: Sequence[str] | dict | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, overrides)


def _override_items(overrides) -> list[tuple[str, Any]]:
    """``["--k_shot", "1", "--dataset.n_classes=40"]`` or a dict into typed (key, value) pairs."""
    if not overrides:
        return []
    if isinstance(overrides, dict):
        return list(overrides.items())
    items, tokens = [], list(overrides)
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"override {tok!r} must look like --key value")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"override --{key} is missing a value")
            raw = tokens[i + 1]
            i += 2
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        items.append((key, value))
    return items
