"""Run configuration: one strict JSON document shared by every CLI command.

Unknown keys anywhere are rejected. ``schema_version`` must be present.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .model import ModelConfig, StageConfig
from .train import TrainConfig

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StageSection(_Strict):
    num_sta_layers: int = Field(ge=1)
    token_grid: tuple[int, int]
    heads: int = Field(ge=1)


class ModelSection(_Strict):
    input_channels: int = 1
    num_classes: int = 9
    base_channels: int = 64
    input_size: tuple[int, int] = (224, 224)
    stages: list[StageSection] = [
        StageSection(num_sta_layers=1, token_grid=(16, 16), heads=2),
        StageSection(num_sta_layers=2, token_grid=(8, 8), heads=4),
        StageSection(num_sta_layers=3, token_grid=(4, 4), heads=8),
        StageSection(num_sta_layers=4, token_grid=(2, 2), heads=16),
    ]


class TrainSection(_Strict):
    lr_initial: float = 1e-2
    schedule: Literal["poly", "cosine"] = "poly"
    epochs: int = 300
    max_iterations: Optional[int] = None
    batch_size: int = 8
    w_ce: float = 0.4
    w_dice: float = 0.6
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    aug_probability: float = 0.5
    dice_epsilon: float = 1e-5
    poly_per_epoch: bool = False


class DataSection(_Strict):
    dataset_dir: str = "data/synthetic"
    train_split: str = "train"
    eval_split: str = "test"


class GenDataSection(_Strict):
    n_train: int = 200
    n_test: int = 50
    extent: int = 32
    num_classes: int = 3
    seed: int = 0
    noise: float = 0.06


class EvalSection(_Strict):
    checkpoint: Optional[str] = None
    exclude_classes: list[int] = []


class CkaSection(_Strict):
    blocks: Optional[list[str]] = None
    n_samples: int = 64
    max_features: Optional[int] = 4096
    bandwidth: Union[Literal["unit", "median"], float] = "unit"
    dump_dir: Optional[str] = None
    heatmap_cell: int = 16


class FlopsSection(_Strict):
    token_schedules: list[tuple[int, int, int, int]] = []


class RunConfig(_Strict):
    schema_version: Literal[1]
    output_dir: str = "runs/default"
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    data: DataSection = DataSection()
    gen_data: GenDataSection = GenDataSection()
    eval: EvalSection = EvalSection()
    cka: CkaSection = CkaSection()
    flops: FlopsSection = FlopsSection()

    def to_model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            input_channels=m.input_channels,
            num_classes=m.num_classes,
            base_channels=m.base_channels,
            input_size=m.input_size,
            stages=tuple(StageConfig(s.num_sta_layers, s.token_grid, s.heads) for s in m.stages),
        )

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(**self.train.model_dump())

    def to_json(self) -> dict:
        return self.model_dump(mode="json")


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending key (dotted)."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def parse_config(doc: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as e:
        err = e.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ConfigError(err["msg"], path) from e


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig(schema_version=SCHEMA_VERSION)
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config: {e}", str(path)) from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object", str(path))
    return parse_config(doc)
