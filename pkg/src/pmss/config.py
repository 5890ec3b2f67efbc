"""Run configuration: JSON documents -> validated dataclasses.

A run config bundles backbone architecture (plus how its frozen weights are
obtained: a checkpoint, an inline source-pretraining recipe, or random
init), matcher placement, tuning strategy, loss weights, optimizer schedule,
and the synthetic data recipe. Validation errors name the offending field so
the CLI can map them to exit code 2.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .data import SynthSpec, downstream_spec, source_spec, thin_spec


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


def load_schema(name: str) -> dict:
    text = resources.files("pmss.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_against_schema(doc: dict, schema_name: str) -> None:
    jsonschema.validate(doc, load_schema(schema_name))


@dataclass
class DataConfig:
    preset: str | None = "downstream"
    seed: int | None = None
    size: int | None = None
    num_classes: int | None = None
    shapes_min: int | None = None
    shapes_max: int | None = None
    palette_id: int | None = None
    texture_id: int | None = None
    train_count: int | None = None
    val_count: int | None = None
    thin_only: bool | None = None
    ignore_index: int | None = None
    dir: str | None = None  # load a saved dataset instead of generating

    _PRESETS = {"source": source_spec, "downstream": downstream_spec, "thin": thin_spec}

    def to_spec(self) -> SynthSpec:
        if self.preset is not None and self.preset not in self._PRESETS:
            raise ConfigError("data.preset", f"unknown preset {self.preset!r}")
        base = self._PRESETS[self.preset]() if self.preset else SynthSpec()
        fields = {}
        for name in (
            "seed",
            "size",
            "num_classes",
            "shapes_min",
            "shapes_max",
            "palette_id",
            "texture_id",
            "train_count",
            "val_count",
            "thin_only",
            "ignore_index",
        ):
            value = getattr(self, name)
            fields[name] = getattr(base, name) if value is None else value
        try:
            return SynthSpec(**fields)
        except ValueError as e:
            raise ConfigError("data", str(e)) from e


@dataclass
class PretrainConfig:
    steps: int = 500
    lr: float = 0.05
    batch: int = 4
    seed: int = 0
    data: DataConfig = field(default_factory=lambda: DataConfig(preset="source"))

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("backbone.pretrain.steps", "must be >= 0")
        if self.lr <= 0:
            raise ConfigError("backbone.pretrain.lr", "must be positive")


@dataclass
class BackboneConfig:
    kind: str = "cnn"
    channels: tuple[int, ...] = (32, 64, 128, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    seed: int = 0
    embed_dim: int = 64
    layers: int = 12
    patch: int = 8
    n_stages: int = 3
    image_size: int = 64
    checkpoint: str | None = None
    pretrain: PretrainConfig | None = None

    def __post_init__(self):
        if self.kind not in ("cnn", "vit"):
            raise ConfigError("backbone.kind", f"must be 'cnn' or 'vit', got {self.kind!r}")
        if self.kind == "cnn":
            if len(self.channels) != len(self.depths):
                raise ConfigError("backbone.depths", "must match channels in length")
            if any(c <= 0 for c in self.channels):
                raise ConfigError("backbone.channels", "must be positive")
            if any(d <= 0 for d in self.depths):
                raise ConfigError("backbone.depths", "must be positive")


@dataclass
class SpmConfig:
    stages: tuple[int, ...] = ()
    c: int = 256
    r: int = 1
    pdc_groups: int | None = None
    dilations: tuple[int, ...] = (1, 2, 3, 4)
    conv1x1_groups: int = 1
    relu_inside: bool = True

    def __post_init__(self):
        if self.r < 1:
            raise ConfigError("spm.R", f"must be >= 1, got {self.r}")
        if self.c < 4 or self.c % 4:
            raise ConfigError("spm.C", f"must be a positive multiple of 4, got {self.c}")
        if len(self.dilations) != 4:
            raise ConfigError("spm.dilations", "must list exactly 4 rates")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("spm.dilations", "rates must be >= 1")


@dataclass
class StrategyConfig:
    tag: str = "prompt_matched"
    side_channels: int = 64
    side_groups: int = 4
    prompt_lr_multiplier: float = 1.0

    def __post_init__(self):
        from .pipeline import STRATEGY_TAGS

        if self.tag not in STRATEGY_TAGS:
            raise ConfigError("strategy", f"unknown tag {self.tag!r}")


@dataclass
class LossConfig:
    weights: tuple[float, ...] = (0.05, 0.1, 0.2, 0.3, 0.4)
    ignore_index: int | None = None

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ConfigError("loss.weights", "must be nonnegative")


@dataclass
class TrainConfig:
    steps: int = 300
    lr: float = 0.1
    momentum: float = 0.9
    batch: int = 4
    seed: int = 0
    weight_decay: float = 0.0
    eval_every: int = 0
    dice_class: int | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("train.steps", "must be >= 0")
        if self.lr < 0:
            raise ConfigError("train.lr", "must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum", "must be in [0,1)")
        if self.batch < 1:
            raise ConfigError("train.batch", "must be >= 1")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    spm: SpmConfig = field(default_factory=SpmConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    head_hidden: int = 64

    def __post_init__(self):
        if self.spm.stages and self.strategy.tag != "prompt_matched":
            raise ConfigError("spm.stages", "matcher stages require the prompt_matched strategy")

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        doc["spm"]["R"] = doc["spm"].pop("r")
        doc["spm"]["C"] = doc["spm"].pop("c")
        return json.loads(json.dumps(doc))  # tuples -> lists


def _tupled(d: dict, *names: str) -> dict:
    out = dict(d)
    for n in names:
        if n in out and out[n] is not None:
            out[n] = tuple(out[n])
    return out


def config_from_dict(doc: dict) -> RunConfig:
    validate_against_schema(doc, "run_config")
    bb = _tupled(doc.get("backbone", {}), "channels", "depths")
    if "pretrain" in bb and bb["pretrain"] is not None:
        pre = dict(bb["pretrain"])
        pre["data"] = DataConfig(**pre.get("data", {"preset": "source"}))
        bb["pretrain"] = PretrainConfig(**pre)
    spm_doc = _tupled(doc.get("spm", {}), "stages", "dilations")
    if "R" in spm_doc:
        spm_doc["r"] = spm_doc.pop("R")
    if "C" in spm_doc:
        spm_doc["c"] = spm_doc.pop("C")
    strategy_doc = doc.get("strategy", {})
    if isinstance(strategy_doc, str):
        strategy_doc = {"tag": strategy_doc}
    loss_doc = _tupled(doc.get("loss", {}), "weights")
    try:
        return RunConfig(
            backbone=BackboneConfig(**bb),
            spm=SpmConfig(**spm_doc),
            strategy=StrategyConfig(**strategy_doc),
            loss=LossConfig(**loss_doc),
            train=TrainConfig(**doc.get("train", {})),
            data=DataConfig(**doc.get("data", {})),
            head_hidden=doc.get("head_hidden", 64),
        )
    except TypeError as e:
        raise ConfigError("config", str(e)) from e


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError("config", f"cannot read {path}: {e}") from e
    try:
        return config_from_dict(doc)
    except jsonschema.ValidationError as e:
        field_path = ".".join(str(p) for p in e.absolute_path) or "config"
        raise ConfigError(field_path, e.message) from e
