"""Experiment configuration: one JSON document, validated against a shipped schema."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .data_synth import SynthConfig
from .encoders import EhrEncoderConfig, ImgEncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .preprocess import AugmentParams, ClaheParams
from .schema import TaskSpec
from .training import DEFAULT_LEARNING_RATES

LOSS_MODES = ("bce", "uncertainty")


def load_schema(name: str) -> dict:
    return json.loads(resources.files("clinfuse").joinpath("schemas", name).read_text())


@dataclass
class ClaheConfig:
    enabled: bool = False
    tile_grid: tuple = (8, 8)
    clip_limit: float = 2.0
    # CLAHE runs on the stored full-size image before any resize/augmentation
    stage: str = "before_resize"

    def params(self) -> ClaheParams:
        return ClaheParams(tuple(self.tile_grid), float(self.clip_limit))


@dataclass
class PreprocessConfig:
    clahe: ClaheConfig = field(default_factory=ClaheConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)


@dataclass
class EncodersConfig:
    ehr: EhrEncoderConfig = field(default_factory=EhrEncoderConfig)
    img: ImgEncoderConfig = field(default_factory=ImgEncoderConfig)
    ehr_lr: float | None = None  # None: reported value for the task
    img_lr: float | None = None
    epochs: int = 20
    patience: int = 5
    batch_size: int = 16


@dataclass
class FinetuneConfig:
    lr: float | None = None
    log_var_lr: float | None = None  # None: log-variances share lr
    epochs: int = 20
    patience: int = 5
    batch_size: int = 16


@dataclass
class DataConfig:
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    path: str | None = None
    split_ratios: tuple = (0.70, 0.10, 0.20)


@dataclass
class Seeds:
    data: int = 0
    split: int = 0
    train: int = 0


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    task: str = "phenotyping"
    num_labels: int | None = None
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    encoders: EncodersConfig = field(default_factory=EncodersConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss_mode: str = "bce"
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/experiment"
    threshold: float = 0.5

    # --- derived -----------------------------------------------------------
    def task_spec(self) -> TaskSpec:
        try:
            return TaskSpec.from_name(self.task, self.num_labels)
        except ValueError as exc:
            raise ConfigError("task", str(exc)) from None

    def _default_lr(self, stage: str, explicit):
        if explicit is not None:
            return float(explicit)
        if self.task not in DEFAULT_LEARNING_RATES:
            raise ConfigError(stage, f"no default learning rate for task {self.task!r}; set it explicitly")
        return DEFAULT_LEARNING_RATES[self.task][stage]

    def ehr_lr(self) -> float:
        return self._default_lr("pretrain_ehr", self.encoders.ehr_lr)

    def img_lr(self) -> float:
        return self._default_lr("pretrain_img", self.encoders.img_lr)

    def finetune_lr(self) -> float:
        return self._default_lr("finetune", self.finetune.lr)

    def synth_config(self) -> SynthConfig:
        s = copy.deepcopy(self.data.synth)
        s.task = self.task
        s.num_labels = self.num_labels
        return s

    # --- validation / serialisation ---------------------------------------
    def validate(self) -> "ExperimentConfig":
        try:
            jsonschema.validate(self.to_dict(), load_schema("config.schema.json"))
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(where, exc.message) from None
        self.task_spec()
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError("loss_mode", f"must be one of {LOSS_MODES}")
        if (self.data.synth is None) == (self.data.path is None):
            raise ConfigError("data", "set exactly one of data.synth and data.path")
        if self.data.synth is not None:
            self.synth_config().validate()
        if abs(sum(self.data.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("data.split_ratios", "must sum to 1")
        self.preprocess.clahe.params().validate()
        self.preprocess.augment.validate()
        self.encoders.ehr.validate()
        self.encoders.img.validate()
        self.fusion.validate()
        if self.fusion.kind in ("attention", "lstm", "ehr_only") and self.encoders.ehr.hidden != self.fusion.dim:
            raise ConfigError("fusion.dim", "must equal encoders.ehr.hidden")
        for name, lr in (("encoders.ehr_lr", self.ehr_lr()), ("encoders.img_lr", self.img_lr()),
                         ("finetune.lr", self.finetune_lr())):
            if not lr > 0:
                raise ConfigError(name, "learning rate must be positive")
        if self.finetune.log_var_lr is not None and not self.finetune.log_var_lr > 0:
            raise ConfigError("finetune.log_var_lr", "learning rate must be positive")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold", "must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["split_ratios"] = list(self.data.split_ratios)
        if self.data.synth is not None:
            d["data"]["synth"] = self.data.synth.to_dict()
        d["preprocess"]["clahe"]["tile_grid"] = list(self.preprocess.clahe.tile_grid)
        d["preprocess"]["augment"] = self.preprocess.augment.to_dict()
        d["fusion"] = self.fusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        try:
            jsonschema.validate(d, load_schema("config.schema.json"))
        except jsonschema.ValidationError as exc:
            where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(where, exc.message) from None
        data = d.pop("data", {})
        synth = data.get("synth", {}) if "synth" in data or "path" not in data else None
        data_cfg = DataConfig(
            synth=SynthConfig.from_dict(synth) if synth is not None else None,
            path=data.get("path"),
            split_ratios=tuple(data.get("split_ratios", (0.70, 0.10, 0.20))),
        )
        pre = d.pop("preprocess", {})
        clahe = dict(pre.get("clahe", {}))
        if "tile_grid" in clahe:
            clahe["tile_grid"] = tuple(clahe["tile_grid"])
        aug = dict(pre.get("augment", {}))
        if "scale" in aug:
            aug["scale"] = tuple(aug["scale"])
        enc = dict(d.pop("encoders", {}))
        ehr = EhrEncoderConfig(**enc.pop("ehr", {}))
        img = ImgEncoderConfig(**enc.pop("img", {}))
        fusion = dict(d.pop("fusion", {}))
        if "lstm_order" in fusion:
            fusion["lstm_order"] = tuple(fusion["lstm_order"])
        return cls(
            data=data_cfg,
            preprocess=PreprocessConfig(ClaheConfig(**clahe), AugmentParams(**aug)),
            encoders=EncodersConfig(ehr=ehr, img=img, **enc),
            fusion=FusionConfig(**fusion),
            finetune=FinetuneConfig(**d.pop("finetune", {})),
            seeds=Seeds(**d.pop("seeds", {})),
            **d,
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def apply_overrides(config_dict: dict, overrides) -> dict:
    """Apply ``dotted.path=value`` overrides; values are parsed as JSON when possible."""
    d = copy.deepcopy(config_dict)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {} if node.get(p) is None else node[p]
                if not isinstance(node[p], dict):
                    raise ConfigError(key, f"{p} is not a section")
            node = node[p]
        node[parts[-1]] = value
    return d
