"""Experiment configuration schema.

Configs are YAML or JSON documents. Everything is validated up front so
that a bad field fails before any computation, with the offending section
path in the message.
"""

from pathlib import Path
from typing import Literal, Optional, Union

import pydantic
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import attacks, defenses, model, trainer
from .errors import ConfigError
from .metrics import PAPER_LAMBDAS


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LayerSection(_Section):
    kind: Literal["linear", "conv2d", "relu", "flatten", "avgpool2d"]
    in_features: int = 0
    out_features: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    size: int = 2
    bias: bool = True


class ModelSection(_Section):
    preset: Optional[Literal["mlp", "cnn"]] = "cnn"
    layers: Optional[list[LayerSection]] = None
    hidden: list[int] = [256, 128]
    channels: list[int] = [8, 16]
    hooks: Optional[list[int]] = None
    input_shift: float = 127.5
    input_scale: float = 1 / 127.5

    def build(self, input_shape, num_classes):
        if self.layers:
            return model.ModelGraph([model.LayerSpec(**l.model_dump()) for l in self.layers], input_shape,
                                    hooks=self.hooks, input_shift=self.input_shift, input_scale=self.input_scale)
        if self.preset == "mlp":
            m = model.mlp(input_shape, num_classes, tuple(self.hidden), self.input_shift, self.input_scale)
        else:
            m = model.cnn(input_shape, num_classes, tuple(self.channels), self.input_shift, self.input_scale)
        if self.hooks is not None:
            m = model.ModelGraph(m.layers, m.input_shape, hooks=tuple(self.hooks),
                                 input_shift=m.input_shift, input_scale=m.input_scale)
        return m


class SynthSection(_Section):
    n_per_class: int = Field(100, ge=1)
    classes: int = Field(10, ge=1)
    image_size: int = Field(16, ge=1)
    channels: int = Field(1, ge=1)
    noise_std: float = Field(40.0, ge=0)
    contrast: float = Field(1.0, gt=0, le=1)
    phase_jitter: float = Field(0.0, ge=0)
    seed: Optional[int] = None


class DataSection(_Section):
    train_path: Optional[str] = None
    eval_path: Optional[str] = None
    synth: Optional[SynthSection] = None
    eval_n_per_class: int = Field(20, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if self.synth is None and (self.train_path is None or self.eval_path is None):
            raise ValueError("give either synth parameters or both train_path and eval_path")
        return self


class AdvSection(_Section):
    mix_fraction: float = Field(0.2, ge=0, le=1)
    lam: float = Field(2.0, ge=0)
    attack: Literal["fgsm", "iterative"] = "fgsm"
    step: float = Field(1.0, gt=0)


class TrainSection(_Section):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(64, ge=1)
    lr_schedule: list[tuple[int, float]] = [(0, 0.05)]
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    dropout_rate: Optional[float] = Field(None, ge=0, lt=1)
    adv: Optional[AdvSection] = None

    @field_validator("lr_schedule")
    @classmethod
    def _positive(cls, v):
        if not v:
            raise ValueError("lr_schedule is empty")
        if any(lr <= 0 for _, lr in v):
            raise ValueError("learning rates must be positive")
        return v

    def build(self):
        adv = trainer.AdvConfig(**self.adv.model_dump()) if self.adv else None
        return trainer.TrainConfig(self.epochs, self.batch_size, tuple(self.lr_schedule), self.momentum,
                                   self.weight_decay, self.dropout_rate, adv)


class DefenseSection(_Section):
    kind: Literal["dense", "sap", "dropout", "rnw", "rsw", "rna", "rsa", "dwp", "swp"] = "dense"
    k: float = Field(100.0, gt=0)
    per_layer: dict[int, float] = {}
    std: float = Field(0.0, ge=0)
    keep_percent: float = Field(100.0, gt=0)
    rate: float = Field(0.0, ge=0, lt=1)

    @model_validator(mode="after")
    def _dwp_bound(self):
        if self.kind == "dwp" and self.keep_percent > 100:
            raise ValueError("dwp keep_percent cannot exceed 100")
        return self

    def build(self):
        kind = self.kind
        if kind == "dense":
            return defenses.IdentityPolicy()
        if kind == "sap":
            return defenses.make_policy(defenses.SapConfig(self.k, dict(self.per_layer)))
        if kind == "dropout":
            return defenses.make_policy(defenses.DropoutConfig(self.rate))
        if kind in ("rnw", "rsw", "rna", "rsa"):
            return defenses.make_policy(defenses.NoiseConfig(kind.upper(), self.std))
        return defenses.make_policy(defenses.PruneConfig(kind.upper(), self.keep_percent))


class AttackSection(_Section):
    kind: Literal["none", "random", "fgsm", "iterative"] = "fgsm"
    gradient_source: Literal["dense", "defended"] = "dense"
    step: float = Field(1.0, gt=0)
    mc_per_step: int = Field(10, ge=1)
    sign_then_average: bool = False
    integer_pixels: bool = False

    def build(self, lam, mc_samples):
        return attacks.AttackSpec(self.kind, float(lam), self.step, mc_samples, self.mc_per_step,
                                  self.gradient_source, self.sign_then_average, self.integer_pixels)


class EvalSection(_Section):
    lambdas: list[float] = list(PAPER_LAMBDAS)
    n_passes: int = Field(10, ge=1)
    mc_samples: list[int] = [100]
    calibration_bins: Optional[int] = Field(10, ge=1)
    block_size: int = Field(64, ge=1)
    export_limit: Optional[int] = Field(None, ge=1)

    @field_validator("lambdas")
    @classmethod
    def _non_negative(cls, v):
        if any(l < 0 for l in v):
            raise ValueError("lambda values must be non-negative")
        return v

    @field_validator("mc_samples")
    @classmethod
    def _positive_mc(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("mc_samples must be a non-empty list of positive integers")
        return v


class ExperimentConfig(_Section):
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"
    output_dir: Optional[str] = None
    model: ModelSection = ModelSection()
    data: DataSection
    train: TrainSection = TrainSection()
    defense: Union[DefenseSection, list[DefenseSection]] = [DefenseSection(kind="dense")]
    attack: list[AttackSection] = []
    eval: EvalSection = EvalSection()

    @property
    def defenses(self):
        return self.defense if isinstance(self.defense, list) else [self.defense]

    def check_paths(self, base="."):
        for key in ("train_path", "eval_path"):
            p = getattr(self.data, key)
            if p is not None and not (Path(base) / p).is_dir():
                raise ConfigError(f"data.{key}: directory {p!r} does not exist")


def _format_errors(exc):
    parts = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(obj):
    try:
        return ExperimentConfig.model_validate(obj)
    except pydantic.ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None


def load_config(path, check_paths=True):
    path = Path(path)
    try:
        obj = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    cfg = parse_config(obj)
    if check_paths:
        cfg.check_paths(path.parent)
    return cfg
