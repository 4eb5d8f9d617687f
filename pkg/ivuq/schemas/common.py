from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional, Dict, Any, List, Tuple

import numpy as np

from ivuq.schemas.ivim import BValueSchedule, IvimParams, PriorRanges
from ivuq.schemas.network import HeadSpec


class ErrorDetail(BaseModel):
    code: str
    message: str
    details: Optional[Dict[str, Any]] = None


class ErrorResponse(BaseModel):
    error: ErrorDetail


class Provenance(BaseModel):
    config_hash: str = ""
    seed: int = 0


class EnsembleManifest(BaseModel):
    head: HeadSpec
    prior_ranges: PriorRanges
    b_values: List[float]
    layer_sizes: List[int]
    member_files: List[str]
    member_seeds: List[int]
    provenance: Provenance = Field(default_factory=Provenance)


class SplitManifest(BaseModel):
    dataset_file: str
    n_total: int
    n_train: int
    n_validation: int
    fraction: float
    seed: int
    provenance: Provenance = Field(default_factory=Provenance)


class FitResult(BaseModel):
    params: IvimParams
    residual: float = Field(..., description="sum of squared errors")
    converged: bool
    iterations: int = 0


class VolumeInput(BaseModel):
    """Raw float32 stack (x, y, z, n_b) in C order plus sidecar metadata."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dims: Tuple[int, int, int]
    schedule: BValueSchedule
    signals: np.ndarray
    mask: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def validate_shapes(self) -> "VolumeInput":
        expected = tuple(self.dims) + (len(self.schedule),)
        if self.signals.shape != expected:
            raise ValueError(f"signal stack shape {self.signals.shape} != {expected}")
        if self.mask is not None and self.mask.shape != tuple(self.dims):
            raise ValueError(f"mask shape {self.mask.shape} != volume dims {tuple(self.dims)}")
        return self

    @property
    def n_b(self) -> int:
        return len(self.schedule)
