import math
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PARAMETER_NAMES = ("d", "f", "d_star")
PARAMETER_LABELS = {"d": "D", "f": "f", "d_star": "D*"}

DEFAULT_B_VALUES = [0, 15, 60, 100, 150, 170, 190, 220, 280, 440, 560, 700, 850, 1000]


class IvimParams(BaseModel):
    d: float = Field(..., description="diffusion coefficient (mm²/s)")
    f: float = Field(..., description="perfusion fraction")
    d_star: float = Field(..., description="pseudo-diffusion coefficient (mm²/s)")

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.f, self.d_star], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "IvimParams":
        d, f, d_star = (float(v) for v in values)
        return cls(d=d, f=f, d_star=d_star)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.d, self.f, self.d_star))


class ParameterRange(BaseModel):
    min: float
    max: float

    @model_validator(mode="after")
    def validate_order(self) -> "ParameterRange":
        if not self.min < self.max:
            raise ValueError(f"range must satisfy min < max, got [{self.min}, {self.max}]")
        return self

    @property
    def width(self) -> float:
        return self.max - self.min


class PriorRanges(BaseModel):
    """Uniform training prior; also the [0,1] label normalization."""

    d: ParameterRange = ParameterRange(min=0.0, max=0.003)
    f: ParameterRange = ParameterRange(min=0.0, max=0.4)
    d_star: ParameterRange = ParameterRange(min=0.003, max=0.2)

    @classmethod
    def from_tuples(
        cls,
        d: Tuple[float, float],
        f: Tuple[float, float],
        d_star: Tuple[float, float],
    ) -> "PriorRanges":
        return cls(
            d=ParameterRange(min=d[0], max=d[1]),
            f=ParameterRange(min=f[0], max=f[1]),
            d_star=ParameterRange(min=d_star[0], max=d_star[1]),
        )

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.d.min, self.f.min, self.d_star.min], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.d.max, self.f.max, self.d_star.max], dtype=np.float64)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def normalize(self, values: np.ndarray) -> np.ndarray:
        """Physical (..., 3) -> normalized (..., 3)."""
        return (np.asarray(values, dtype=np.float64) - self.lower) / self.width

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        """Normalized (..., 3) -> physical (..., 3); values outside [0,1] pass through."""
        return np.asarray(values, dtype=np.float64) * self.width + self.lower

    def contains(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return np.all((values >= self.lower) & (values <= self.upper), axis=-1)


class BValueSchedule(BaseModel):
    values: List[float] = Field(default_factory=lambda: [float(b) for b in DEFAULT_B_VALUES])

    @field_validator("values")
    @classmethod
    def validate_values(cls, v: List[float]) -> List[float]:
        if len(v) < 2:
            raise ValueError("schedule needs at least two b-values")
        if v[0] != 0:
            raise ValueError("first b-value must be exactly 0")
        if any(b2 <= b1 for b1, b2 in zip(v, v[1:])):
            raise ValueError("b-values must be strictly increasing")
        return [float(b) for b in v]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.values)

    def matches(self, other_values, atol: float = 1e-3) -> bool:
        other = np.asarray(other_values, dtype=np.float64)
        return other.shape == (len(self.values),) and bool(
            np.allclose(other, self.as_array(), rtol=0.0, atol=atol)
        )


class SignalRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    schedule: BValueSchedule
    s: np.ndarray
    normalized: bool = False
    noisy: bool = False

    @field_validator("s", mode="before")
    @classmethod
    def coerce_signal(cls, v) -> np.ndarray:
        return np.array(v, dtype=np.float64, copy=True)

    @model_validator(mode="after")
    def validate_signal(self) -> "SignalRecord":
        if self.s.shape != (len(self.schedule),):
            raise ValueError(
                f"signal length {self.s.shape} does not match schedule length {len(self.schedule)}"
            )
        if not np.all(np.isfinite(self.s)):
            raise ValueError("signal amplitudes must be finite")
        if np.any(self.s < 0):
            raise ValueError("signal amplitudes must be non-negative")
        if self.normalized and self.s[0] != 1.0:
            raise ValueError("normalized record must have s[0] == 1")
        return self
