from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

DEFAULT_LEVELS = [float(g) for g in range(5, 100, 5)]


class CalibrationCurve(BaseModel):
    nominal_levels: List[float] = Field(default_factory=lambda: list(DEFAULT_LEVELS), description="γ (%)")
    observed_picp: List[float] = Field(default_factory=list)
    miscalibration_area: Optional[float] = Field(None, description="percent")

    @field_validator("nominal_levels")
    @classmethod
    def validate_levels(cls, v: List[float]) -> List[float]:
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("nominal levels must be strictly increasing")
        if any(not 0 < g < 100 for g in v):
            raise ValueError("nominal levels must lie in (0, 100)")
        return v

    @model_validator(mode="after")
    def validate_observed(self) -> "CalibrationCurve":
        if len(self.observed_picp) != len(self.nominal_levels):
            raise ValueError("observed_picp must match nominal_levels")
        if any(not 0.0 <= p <= 1.0 for p in self.observed_picp):
            raise ValueError("observed PICP values must lie in [0, 1]")
        return self

    @property
    def nominal_fraction(self) -> np.ndarray:
        return np.asarray(self.nominal_levels, dtype=np.float64) / 100.0


class AccuracyRow(BaseModel):
    model: str
    parameter: str
    snr: str
    mdae_median: float
    mdae_mad: float
    mdb_median: float
    mdb_mad: float
    rcv_median: float
    rcv_mad: float
    n_phantoms: int
    n_excluded: int = Field(0, description="voxels with zero ground truth")


class UncertaintyQualityRow(BaseModel):
    model: str
    parameter: str
    snr: str
    crps_median: float
    crps_mad: float
    pinaw90_median: float
    pinaw90_mad: float
    miscalibration_area: float = Field(..., description="percent")


class CalibrationRow(BaseModel):
    model: str
    parameter: str
    snr: str
    nominal: float
    observed: float


class DecompositionRow(BaseModel):
    model: str
    parameter: str
    snr: str
    au_median: float
    au_mad: float
    eu_median: float
    eu_mad: float


class RoiRow(BaseModel):
    model: str
    parameter: str
    n_voxels: int
    median: float
    mad: float
    rcv: Optional[float] = None
    au_median: Optional[float] = None
    eu_median: Optional[float] = None


class MetricReport(BaseModel):
    accuracy: List[AccuracyRow] = Field(default_factory=list)
    uncertainty_quality: List[UncertaintyQualityRow] = Field(default_factory=list)
    calibration: List[CalibrationRow] = Field(default_factory=list)
    decomposition: List[DecompositionRow] = Field(default_factory=list)
    roi: List[RoiRow] = Field(default_factory=list)
