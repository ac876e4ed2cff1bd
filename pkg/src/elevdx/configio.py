"""Flat key-value config files: schemas, training configs, experiment configs.

All three formats share one syntax: UTF-8 text, one ``key: value`` pair per
line, ``#`` comments, blank lines ignored. Keys may repeat only where noted
(schema ``group`` entries). Example schema file::

    diagnosis_classes: BCC, MEL, NEV, SK, MISC
    elevation_classes: flat, palpable, nodular
    group: basal cell carcinoma -> BCC
    group: melanoma -> MEL

Experiment configs bind a manifest, a schema, a split spec, a backbone, a
fusion mode, and the training schedule into one runnable unit; training keys
are named exactly like the TrainConfig fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .dataio import IMAGENET_MEAN, IMAGENET_STD, LabelSchema, PreprocessConfig, STRATIFY_CHOICES
from .errors import ConfigError
from .models import FAMILIES, FUSION_MODES
from .training import TrainConfig


def parse_kv_lines(path) -> list[tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    pairs = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key: value', got {raw!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def _split_list(value: str) -> list[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def load_schema_file(path) -> LabelSchema:
    pairs = parse_kv_lines(path)
    diagnosis, elevation, grouping = None, None, {}
    for key, value in pairs:
        if key == "diagnosis_classes":
            diagnosis = tuple(_split_list(value))
        elif key == "elevation_classes":
            elevation = tuple(_split_list(value))
        elif key == "group":
            raw, sep, grouped = value.partition("->")
            if not sep:
                raise ConfigError(f"schema {path}: group entry needs 'raw -> grouped', got {value!r}")
            grouping[raw.strip()] = grouped.strip()
        else:
            raise ConfigError(f"schema {path}: unknown key {key!r}")
    if diagnosis is None or elevation is None:
        raise ConfigError(f"schema {path}: diagnosis_classes and elevation_classes are required")
    return LabelSchema(diagnosis_classes=diagnosis, elevation_classes=elevation,
                       diagnosis_grouping=grouping)


def save_schema_file(schema: LabelSchema, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"diagnosis_classes: {', '.join(schema.diagnosis_classes)}",
             f"elevation_classes: {', '.join(schema.elevation_classes)}"]
    for raw, grouped in schema.diagnosis_grouping.items():
        lines.append(f"group: {raw} -> {grouped}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_bool(value: str, key: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


_TRAIN_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)
                      if f.name not in ("class_weights",)}


def train_config_from_pairs(pairs: dict[str, str], seed_override: int | None = None) -> TrainConfig:
    kwargs = {}
    for name in _TRAIN_FIELD_TYPES:
        if name not in pairs:
            continue
        value = pairs[name]
        if name in ("epochs", "batch_size", "lr_decay_every", "seed", "repeats"):
            kwargs[name] = int(value)
        elif name == "deterministic":
            kwargs[name] = _parse_bool(value, name)
        else:
            kwargs[name] = float(value)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return TrainConfig(**kwargs)


def load_train_config(path, seed_override: int | None = None) -> TrainConfig:
    return train_config_from_pairs(dict(parse_kv_lines(path)), seed_override)


@dataclass
class ExperimentConfig:
    manifest: str
    schema: str
    out_dir: str
    backbone: str = "vgg16-gap"
    pretrained: bool = False
    fusion: str = "none"
    elevation_labels: str | None = None
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    stratify_on: str = "elevation"
    seed: int = 0
    device: str = "cpu"
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if self.backbone not in FAMILIES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choices: {FAMILIES}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}; choices: {FUSION_MODES}")
        if self.stratify_on not in STRATIFY_CHOICES:
            raise ConfigError(f"stratify_on must be one of {STRATIFY_CHOICES}")
        if self.fusion in ("soft", "discrete_onehot") and not self.elevation_labels:
            raise ConfigError(
                f"fusion mode {self.fusion!r} requires an elevation_labels file")


_KNOWN_KEYS = {"manifest", "schema", "out_dir", "backbone", "pretrained", "fusion",
               "elevation_labels", "ratios", "stratify_on", "seed", "device",
               "image_size", "normalize_mean", "normalize_std", *_TRAIN_FIELD_TYPES}


def load_experiment_config(path, out_override=None, seed_override: int | None = None) -> ExperimentConfig:
    raw = dict(parse_kv_lines(path))
    unknown = set(raw) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"experiment config {path}: unknown keys {sorted(unknown)}")
    for required in ("manifest", "schema", "out_dir"):
        if required not in raw and not (required == "out_dir" and out_override):
            raise ConfigError(f"experiment config {path}: missing required key {required!r}")

    base = Path(path).parent

    def _resolve(value):
        candidate = Path(value)
        return str(candidate if candidate.is_absolute() else base / candidate)

    seed = seed_override if seed_override is not None else int(raw.get("seed", 0))
    ratios = tuple(float(r) for r in _split_list(raw.get("ratios", "0.7, 0.15, 0.15")))
    if len(ratios) != 3:
        raise ConfigError(f"ratios must have three values, got {ratios}")
    mean = tuple(float(v) for v in _split_list(raw.get("normalize_mean", ""))) or IMAGENET_MEAN
    std = tuple(float(v) for v in _split_list(raw.get("normalize_std", ""))) or IMAGENET_STD
    preprocess = PreprocessConfig(image_size=int(raw.get("image_size", 224)),
                                  mean=mean, std=std)
    return ExperimentConfig(
        manifest=_resolve(raw["manifest"]),
        schema=_resolve(raw["schema"]),
        out_dir=str(out_override) if out_override else _resolve(raw["out_dir"]),
        backbone=raw.get("backbone", "vgg16-gap"),
        pretrained=_parse_bool(raw.get("pretrained", "false"), "pretrained"),
        fusion=raw.get("fusion", "none"),
        elevation_labels=_resolve(raw["elevation_labels"]) if raw.get("elevation_labels") else None,
        ratios=ratios,
        stratify_on=raw.get("stratify_on", "elevation"),
        seed=seed,
        device=raw.get("device", "cpu"),
        train=train_config_from_pairs(raw, seed_override=seed),
        preprocess=preprocess,
    )


def save_class_weights(class_names, weights, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{name}: {weight!r}" for name, weight in zip(class_names, weights)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_class_weights(path, class_names) -> tuple[float, ...]:
    table = dict(parse_kv_lines(path))
    missing = [c for c in class_names if c not in table]
    if missing:
        raise ConfigError(f"class weight file {path} is missing classes {missing}")
    return tuple(float(table[c]) for c in class_names)
