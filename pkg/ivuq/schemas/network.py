from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator

SIGMA_FLOOR = 1e-4


class HeadKind(str, Enum):
    POINT = "point"
    GAUSSIAN = "gaussian"
    MDN = "mdn"


# Tags used inside model and prediction files.
HEAD_TAGS = {HeadKind.POINT: 0, HeadKind.GAUSSIAN: 1, HeadKind.MDN: 2}
BASELINE_TAG = 3


class HeadSpec(BaseModel):
    kind: HeadKind = HeadKind.MDN
    k: int = Field(10, ge=1, description="mixture components")
    sigma_floor: float = Field(SIGMA_FLOOR, gt=0.0)

    @model_validator(mode="after")
    def validate_k(self) -> "HeadSpec":
        if self.kind == HeadKind.GAUSSIAN and self.k != 1:
            raise ValueError("gaussian head has exactly one component (k == 1)")
        if self.kind == HeadKind.POINT and self.k != 1:
            raise ValueError("point head has no mixture (k == 1)")
        return self

    @property
    def output_width(self) -> int:
        if self.kind == HeadKind.POINT:
            return 3
        if self.kind == HeadKind.GAUSSIAN:
            return 6
        return 9 * self.k

    @property
    def is_probabilistic(self) -> bool:
        return self.kind != HeadKind.POINT

    @classmethod
    def point(cls) -> "HeadSpec":
        return cls(kind=HeadKind.POINT, k=1)

    @classmethod
    def gaussian(cls) -> "HeadSpec":
        return cls(kind=HeadKind.GAUSSIAN, k=1)

    @classmethod
    def mdn(cls, k: int = 10) -> "HeadSpec":
        return cls(kind=HeadKind.MDN, k=k)


class TrainConfig(BaseModel):
    learning_rate: float = Field(1e-4, ge=0.0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(1000, ge=1)
    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.999, gt=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    seed: int = Field(0, ge=0)


class LossHistory(BaseModel):
    train_loss: List[float] = Field(default_factory=list)
    validation_loss: List[Optional[float]] = Field(default_factory=list)

    @property
    def final_validation_loss(self) -> Optional[float]:
        return self.validation_loss[-1] if self.validation_loss else None
