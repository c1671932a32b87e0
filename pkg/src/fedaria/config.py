"""JSON experiment/grid configuration schema and named presets.

An experiment config has the top-level keys ``dataset``, ``federation``,
``model``, ``init``, ``strategy``, ``optimizer``, ``loss``, ``seeds`` and
``output``; every key is optional and falls back to the defaults below.
A grid spec holds a ``base`` experiment config plus named ``architectures``,
``inits`` and ``aggregations`` whose cross product forms the grid.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import FedAriaError
from .federation import RoundConfig, StrategyConfig
from .models import ModelSpec
from .optim import LossConfig
from .pretrain import InitStrategy, SSLConfig


class ConfigError(FedAriaError):
    def __init__(self, message: str, field_path: str = ""):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}" if field_path else message)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BlobsData(_Strict):
    kind: Literal["blobs"] = "blobs"
    num_classes: int = Field(4, ge=2)
    dim: int = Field(8, ge=1)
    n_per_class: int = Field(250, ge=1)
    separation: float = 2.0
    noise_std: float = Field(1.0, ge=0)
    test_fraction: float = Field(0.2, gt=0, lt=1)


class IdxData(_Strict):
    kind: Literal["idx"]
    train_images: str
    train_labels: str
    test_images: str | None = None
    test_labels: str | None = None
    num_classes: int | None = Field(None, ge=2)
    test_fraction: float = Field(0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _files_exist(self):
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ValueError(f"{name} file does not exist: {p}")
        if (self.test_images is None) != (self.test_labels is None):
            raise ValueError("test_images and test_labels must be given together")
        return self


DatasetCfg = Annotated[Union[BlobsData, IdxData], Field(discriminator="kind")]


class FederationCfg(_Strict):
    num_clients: int = Field(4, ge=2)
    alpha: float = Field(0.1, gt=0)
    min_size: int = Field(10, ge=1)
    rounds: int = Field(20, ge=0)
    local_steps: int = Field(50, ge=0)
    batch_size: int = Field(32, ge=1)
    workers: int = Field(1, ge=1)
    share_bn_stats: bool = True
    metric: Literal["accuracy", "balanced_accuracy"] = "accuracy"


class ModelCfg(_Strict):
    hidden_dims: list[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [16])
    activation: Literal["relu", "tanh"] = "relu"
    norm_kind: Literal["none", "batch_norm", "layer_norm", "weight_standardized"] = "none"

    def spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(input_dim, num_classes, tuple(self.hidden_dims), self.activation, self.norm_kind)


class SSLCfg(_Strict):
    epochs: int = Field(10, ge=0)
    lr: float = Field(1e-2, gt=0)
    noise_std: float = Field(0.3, ge=0)
    batch_size: int = Field(32, ge=2)
    unlabeled: DatasetCfg | None = None


class InitCfg(_Strict):
    kind: Literal["random", "checkpoint", "ssl_autoencoder"] = "random"
    scheme: Literal["xavier_uniform", "kaiming_normal"] = "kaiming_normal"
    path: str | None = None
    ssl: SSLCfg | None = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "checkpoint":
            if self.path is None:
                raise ValueError("checkpoint init needs 'path'")
            if not Path(self.path).is_file():
                raise ValueError(f"checkpoint file does not exist: {self.path}")
        elif self.path is not None:
            raise ValueError(f"'path' is only valid for checkpoint init, not {self.kind!r}")
        if self.kind == "ssl_autoencoder" and self.ssl is None:
            self.ssl = SSLCfg()
        if self.kind != "ssl_autoencoder" and self.ssl is not None:
            raise ValueError(f"'ssl' is only valid for ssl_autoencoder init, not {self.kind!r}")
        return self

    def strategy(self) -> InitStrategy:
        if self.kind == "random":
            return InitStrategy("random", self.scheme)
        if self.kind == "checkpoint":
            return InitStrategy("checkpoint", None, self.path)
        s = self.ssl
        return InitStrategy(
            "ssl_autoencoder", None, None, SSLConfig(s.epochs, s.lr, s.noise_std, s.batch_size, self.scheme)
        )


class StrategyCfg(_Strict):
    kind: Literal["fedavg", "fedopt", "scaffold"] = "fedavg"
    server_lr: float = Field(1.0, gt=0)
    server_momentum: float = Field(0.6, ge=0, lt=1)
    server_lr_schedule: Literal["constant", "cosine"] = "cosine"
    server_lr_min: float = Field(0.0, ge=0)
    scaffold_server_lr: float = Field(1.0, gt=0)
    scaffold_weighting: Literal["uniform", "sample_weighted"] = "uniform"

    def build(self) -> StrategyConfig:
        return StrategyConfig(**self.model_dump())


class OptimizerCfg(_Strict):
    kind: Literal["sgd", "sgd_momentum", "adam"] = "sgd_momentum"
    lr: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    schedule: Literal["constant", "cosine"] = "cosine"
    lr_horizon: Literal["round", "global"] = "round"
    lr_min: float = Field(0.0, ge=0)
    persist_state: bool = False


class LossCfg(_Strict):
    kind: Literal["cross_entropy", "weighted_focal"] = "cross_entropy"
    gamma: float = Field(2.0, ge=0)
    class_weights: list[Annotated[float, Field(gt=0)]] | None = None


class OutputCfg(_Strict):
    dir: str = "results"
    record_timing: bool = False


class ExperimentConfig(_Strict):
    dataset: DatasetCfg = Field(default_factory=BlobsData)
    federation: FederationCfg = Field(default_factory=FederationCfg)
    model: ModelCfg = Field(default_factory=ModelCfg)
    init: InitCfg = Field(default_factory=InitCfg)
    strategy: StrategyCfg = Field(default_factory=StrategyCfg)
    optimizer: OptimizerCfg = Field(default_factory=OptimizerCfg)
    loss: LossCfg = Field(default_factory=LossCfg)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output: OutputCfg = Field(default_factory=OutputCfg)

    def round_config(self) -> RoundConfig:
        f, o, l = self.federation, self.optimizer, self.loss
        return RoundConfig(
            rounds=f.rounds,
            local_steps=f.local_steps,
            batch_size=f.batch_size,
            optimizer=o.kind,
            lr=o.lr,
            momentum=o.momentum,
            lr_schedule=o.schedule,
            lr_horizon=o.lr_horizon,
            lr_min=o.lr_min,
            persist_optimizer=o.persist_state,
            loss=LossConfig(l.kind, l.class_weights, l.gamma),
            share_bn_stats=f.share_bn_stats,
        )


class GridSpec(_Strict):
    base: ExperimentConfig = Field(default_factory=ExperimentConfig)
    architectures: dict[str, ModelCfg] = Field(min_length=1)
    inits: dict[str, InitCfg] = Field(min_length=1)
    aggregations: dict[str, StrategyCfg] = Field(min_length=1)
    seeds: list[int] | None = None
    master_seed: int = 0
    workers: int = Field(1, ge=1)

    @property
    def run_seeds(self) -> list[int]:
        return self.seeds if self.seeds is not None else self.base.seeds


# Two hyper-parameter profiles, scaled to desk-size models and synthetic data.
PRESETS: dict[str, dict] = {
    "fedisic-like": {
        "dataset": {"kind": "blobs", "num_classes": 8, "dim": 16, "n_per_class": 150,
                    "separation": 2.5, "noise_std": 1.0},
        "federation": {"num_clients": 6, "alpha": 0.5, "rounds": 20, "local_steps": 200,
                       "batch_size": 64, "metric": "balanced_accuracy"},
        "optimizer": {"kind": "adam", "lr": 5e-4, "schedule": "cosine"},
        "loss": {"kind": "weighted_focal", "gamma": 2.0},
    },
    "organ-like": {
        "dataset": {"kind": "blobs", "num_classes": 11, "dim": 16, "n_per_class": 150,
                    "separation": 2.5, "noise_std": 1.0},
        "federation": {"num_clients": 4, "alpha": 100.0, "rounds": 20, "local_steps": 50,
                       "batch_size": 128, "metric": "accuracy"},
        "optimizer": {"kind": "sgd_momentum", "lr": 0.01, "momentum": 0.9, "schedule": "cosine"},
        "loss": {"kind": "cross_entropy"},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and v.get("kind", out[k].get("kind")) == out[k].get("kind"):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _format_pydantic(err) -> ConfigError:
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"])
    return ConfigError(first["msg"], path)


def read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return data


def parse_experiment(data: dict, preset: str | None = None) -> ExperimentConfig:
    from pydantic import ValidationError as PydanticValidationError

    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", "preset")
        data = deep_merge(PRESETS[preset], data)
    try:
        return ExperimentConfig.model_validate(data)
    except PydanticValidationError as e:
        raise _format_pydantic(e) from e


def parse_grid(data: dict, preset: str | None = None) -> GridSpec:
    from pydantic import ValidationError as PydanticValidationError

    data = dict(data)
    base = data.get("base", {})
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}", "preset")
        base = deep_merge(PRESETS[preset], base)
    data["base"] = base
    try:
        return GridSpec.model_validate(data)
    except PydanticValidationError as e:
        raise _format_pydantic(e) from e


def load_experiment(path, preset: str | None = None) -> ExperimentConfig:
    return parse_experiment(read_json(path), preset)


def load_grid(path, preset: str | None = None) -> GridSpec:
    return parse_grid(read_json(path), preset)


def grid_from_experiment(cfg: ExperimentConfig, name_arch: str = "model", name_init: str | None = None,
                         name_agg: str | None = None) -> GridSpec:
    """Single-cell grid equivalent to one experiment config."""
    return GridSpec(
        base=cfg,
        architectures={name_arch: cfg.model},
        inits={name_init or cfg.init.kind: cfg.init},
        aggregations={name_agg or cfg.strategy.kind: cfg.strategy},
        workers=1,
    )
