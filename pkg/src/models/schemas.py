import os
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False, populate_by_name=True)


class OptConfig(StrictModel):
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(5e-4, ge=0)
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(256, ge=1)


class AnnotatorSpec(StrictModel):
    kind: Literal["confusion_matrix", "instance_dependent"]
    confusion: Optional[List[List[float]]] = None
    idn_rate: Optional[float] = Field(None, ge=0, lt=1)
    idn_projection_seed: Optional[int] = None

    @model_validator(mode="after")
    def _fields_match_kind(self):
        if self.kind == "confusion_matrix":
            if self.confusion is None or self.idn_rate is not None or self.idn_projection_seed is not None:
                raise ValueError("confusion_matrix annotators set `confusion` and nothing else")
            matrix = np.asarray(self.confusion, dtype=np.float64)
            if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 2:
                raise ValueError("confusion must be a square matrix with at least two classes")
            if np.any(matrix < 0) or np.any(np.abs(matrix.sum(axis=1) - 1.0) > 1e-9):
                raise ValueError("confusion rows must be nonnegative and sum to 1")
        else:
            if self.confusion is not None or self.idn_rate is None or self.idn_projection_seed is None:
                raise ValueError("instance_dependent annotators set `idn_rate` and `idn_projection_seed` only")
        return self

    def confusion_matrix(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=np.float64)


class DataConfig(StrictModel):
    n_classes: int = Field(4, ge=2)
    dim: int = Field(16, ge=2)
    n_train: int = Field(6000, ge=1)
    n_test: int = Field(2000, ge=1)
    class_separation: float = Field(3.5, ge=0)
    annotator_accuracies: List[float] = Field(default_factory=lambda: [0.8, 0.9, 0.7])
    idn_rates: List[float] = Field(default_factory=list)
    test_pool_size: Optional[int] = Field(None, ge=1)
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None

    @field_validator("annotator_accuracies")
    @classmethod
    def _accuracies_in_range(cls, values):
        for v in values:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"annotator accuracy {v} outside [0, 1]")
        return values

    @field_validator("idn_rates")
    @classmethod
    def _rates_in_range(cls, values):
        for v in values:
            if not 0.0 <= v < 1.0:
                raise ValueError(f"noise rate {v} outside [0, 1)")
        return values

    @model_validator(mode="after")
    def _pool_consistent(self):
        n_annotators = len(self.annotator_accuracies) + len(self.idn_rates)
        if self.train_csv is None and n_annotators == 0:
            raise ValueError("at least one annotator is required")
        if self.test_pool_size is not None and self.test_pool_size < n_annotators:
            raise ValueError("test_pool_size must be at least the number of training annotators")
        return self


class PretrainConfig(StrictModel):
    opt: OptConfig = Field(default_factory=lambda: OptConfig(epochs=30, batch_size=128))
    small_loss_keep_ratio: float = Field(0.7, gt=0, le=1)
    warmup_epochs: int = Field(5, ge=0)
    heldout_fraction: float = Field(0.1, gt=0, lt=1)
    hidden: List[int] = Field(default_factory=lambda: [64])

    @model_validator(mode="after")
    def _warmup_within_epochs(self):
        if self.warmup_epochs > self.opt.epochs:
            raise ValueError("warmup_epochs cannot exceed opt.epochs")
        return self


class ConsensusConfig(StrictModel):
    method: Literal["weighted", "majority", "random"] = "weighted"
    quality_threshold: float = Field(0.5, ge=0, lt=1)


class LecomhConfig(StrictModel):
    lambda_: float = Field(0.0, ge=0, alias="lambda")
    temperature: float = Field(5.0, gt=0)
    opt: OptConfig = Field(default_factory=OptConfig)
    freeze_classifier: bool = True
    hard_eval: bool = True
    selection_hidden: List[int] = Field(default_factory=lambda: [128])
    collab_hidden: List[int] = Field(default_factory=lambda: [512, 512])
    collab_head: Literal["network", "majority"] = "network"
    n_users: Optional[int] = Field(None, ge=1)

    @field_validator("selection_hidden", "collab_hidden")
    @classmethod
    def _positive_widths(cls, values):
        if any(v < 1 for v in values):
            raise ValueError("hidden widths must be positive")
        return values


class EvalConfig(StrictModel):
    lambdas: List[float] = Field(default_factory=lambda: [0.0, 0.05, 0.2, 0.5, 1.0, 5.0])
    trials: int = Field(5, ge=1)
    coverage_targets: List[float] = Field(default_factory=lambda: [i / 10 for i in range(11)])
    workers: int = Field(1, ge=1)

    @field_validator("lambdas")
    @classmethod
    def _lambdas(cls, values):
        if not values or any(v < 0 for v in values):
            raise ValueError("at least one nonnegative lambda is required")
        if len(set(values)) != len(values):
            raise ValueError("lambda values must be distinct")
        return values

    @field_validator("coverage_targets")
    @classmethod
    def _targets(cls, values):
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("coverage targets must lie in [0, 1]")
        return values


class RunConfig(StrictModel):
    seed: int = 42
    output_dir: str = Field(default_factory=lambda: os.getenv("LECOMH_RUNS_DIR", "runs"))
    data: DataConfig = Field(default_factory=DataConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    consensus: ConsensusConfig = Field(default_factory=ConsensusConfig)
    lecomh: LecomhConfig = Field(default_factory=LecomhConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
