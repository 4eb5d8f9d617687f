from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

WEIGHT_SUM_TOLERANCE = 1e-9


class MixturePrediction(BaseModel):
    """
    Factorized per-parameter Gaussian mixtures in normalized [0,1] space.

    Arrays share the trailing shape (3, K): one 1-D mixture per IVIM
    parameter. Leading axes, if any, index voxels.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    @model_validator(mode="after")
    def validate_mixture(self) -> "MixturePrediction":
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if not (self.weights.shape == self.means.shape == self.stds.shape):
            raise ValueError("weights, means and stds must share one shape")
        if self.weights.ndim < 2 or self.weights.shape[-2] != 3:
            raise ValueError(f"trailing shape must be (3, K), got {self.weights.shape}")
        if np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative")
        if not np.allclose(self.weights.sum(axis=-1), 1.0, rtol=0.0, atol=WEIGHT_SUM_TOLERANCE):
            raise ValueError("mixture weights must sum to 1")
        if np.any(self.stds < 0):
            raise ValueError("mixture stddevs must be non-negative")
        return self

    @property
    def k(self) -> int:
        return int(self.weights.shape[-1])

    @property
    def batch_shape(self):
        return self.weights.shape[:-2]

    def voxel(self, index: int) -> "MixturePrediction":
        return MixturePrediction(
            weights=self.weights[index], means=self.means[index], stds=self.stds[index]
        )


class EnsemblePrediction(BaseModel):
    """
    Per-voxel ensemble output for n voxels.

    map_estimate is physical (n, 3); au/eu are standard deviations in
    percent of the prior range width (n, 3); samples, when drawn, are
    normalized (n, M*S, 3).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    map_estimate: np.ndarray
    au: np.ndarray
    eu: np.ndarray
    samples: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def validate_shapes(self) -> "EnsemblePrediction":
        n = self.map_estimate.shape[0]
        for name in ("au", "eu"):
            arr = getattr(self, name)
            if arr.shape != (n, 3):
                raise ValueError(f"{name} must have shape ({n}, 3), got {arr.shape}")
            finite = arr[np.isfinite(arr)]
            if np.any(finite < 0):
                raise ValueError(f"{name} must be non-negative")
        if self.samples is not None and (self.samples.ndim != 3 or self.samples.shape[0] != n):
            raise ValueError("samples must have shape (n, M*S, 3)")
        return self

    @property
    def total(self) -> np.ndarray:
        return np.sqrt(self.au ** 2 + self.eu ** 2)

    def __len__(self) -> int:
        return int(self.map_estimate.shape[0])


class PredictionMap(BaseModel):
    """
    Contents of a prediction file: maps over an (nx, ny, nz) grid.
    map_estimate is physical, au/eu are percent of the prior range width,
    NaN marks skipped voxels (and absent uncertainties).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind_tag: int
    dims: Tuple[int, int, int]
    map_estimate: np.ndarray
    au: np.ndarray
    eu: np.ndarray

    @model_validator(mode="after")
    def validate_shapes(self) -> "PredictionMap":
        expected = tuple(self.dims) + (3,)
        for name in ("map_estimate", "au", "eu"):
            if getattr(self, name).shape != expected:
                raise ValueError(f"{name} must have shape {expected}")
        return self

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def flat(self, name: str) -> np.ndarray:
        return getattr(self, name).reshape(-1, 3)

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.map_estimate), axis=-1)


class MixtureSidecar(BaseModel):
    """Per-member mixtures of the valid voxels of one prediction file, (M, n_valid, 3, K)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    voxel_index: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @model_validator(mode="after")
    def validate_shapes(self) -> "MixtureSidecar":
        if not (self.weights.shape == self.means.shape == self.stds.shape) or self.weights.ndim != 4:
            raise ValueError("weights, means and stds must share one (M, n, 3, K) shape")
        if self.weights.shape[1] != self.voxel_index.shape[0]:
            raise ValueError("voxel_index must have one entry per stored voxel")
        return self

    @property
    def m(self) -> int:
        return int(self.weights.shape[0])

    def member(self, index: int) -> MixturePrediction:
        # stored as float32; renormalize onto the simplex
        w = self.weights[index].astype(np.float64)
        return MixturePrediction(
            weights=w / w.sum(axis=-1, keepdims=True),
            means=self.means[index].astype(np.float64),
            stds=self.stds[index].astype(np.float64),
        )
