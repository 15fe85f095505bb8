"""Experiment configuration: one JSON file aggregating every component config.

The schema is derived from the component dataclasses, so defaults live in one
place. Unknown keys are rejected at every level. ``ExperimentConfig.model_json_schema()``
gives the documented JSON schema.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Type, get_type_hints

from pydantic import BaseModel, ConfigDict, Field, create_model

from .losses import LossConfig
from .models import EncoderConfig, HeadConfig, TransformerConfig
from .synthgen import GenConfig
from .trainer import TrainConfig

SEED_ENV = "GRASPCOUNT_SEED"


def _section(dc: Type, exclude: Tuple[str, ...] = ()) -> Type[BaseModel]:
    fields: Dict[str, Any] = {}
    hints = get_type_hints(dc)
    for f in dataclasses.fields(dc):
        if f.name in exclude:
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        else:
            default = f.default_factory()
        fields[f.name] = (hints.get(f.name, Any), Field(default=default))
    return create_model(f"{dc.__name__}Section", __config__=ConfigDict(extra="forbid"), **fields)


GenerateSection = _section(GenConfig, exclude=("seed",))
EncoderSection = _section(EncoderConfig)
HeadSection = _section(HeadConfig)
TransformerSection = _section(TransformerConfig)
TrainSection = _section(TrainConfig, exclude=("seed", "stage"))
LossSection = _section(LossConfig)


class PathsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")
    data: Optional[str] = None
    out: Optional[str] = None


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: Optional[int] = None
    generate: GenerateSection = Field(default_factory=GenerateSection)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    head: HeadSection = Field(default_factory=HeadSection)
    transformer: TransformerSection = Field(default_factory=TransformerSection)
    train: TrainSection = Field(default_factory=TrainSection)
    loss: LossSection = Field(default_factory=LossSection)
    paths: PathsSection = Field(default_factory=PathsSection)

    @classmethod
    def load(cls, path: Optional[str]) -> "ExperimentConfig":
        if path is None:
            return cls()
        with open(path) as f:
            return cls.model_validate(json.load(f))

    def resolved_seed(self, flag: Optional[int] = None) -> int:
        """Flag, then config file, then ``GRASPCOUNT_SEED``, then 0."""
        if flag is not None:
            return flag
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV)
        if env:
            return int(env)
        return 0

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**self.encoder.model_dump())

    def head_config(self) -> HeadConfig:
        return HeadConfig(**self.head.model_dump())

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(**self.transformer.model_dump())

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.loss.model_dump())

    def train_config(self, stage: str, seed: int) -> TrainConfig:
        return TrainConfig(stage=stage, seed=seed, **self.train.model_dump())

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.model_dump(mode="json"), f, indent=2, sort_keys=True)
            f.write("\n")
