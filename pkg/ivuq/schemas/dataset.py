from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ivuq.schemas.ivim import BValueSchedule, PriorRanges

N_PHANTOM_ROIS = 6


class TrainingSet(BaseModel):
    """
    Supervised corpus. Rows of ``inputs`` are normalized signals, rows of
    ``labels`` physical (d, f, d_star).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    schedule: BValueSchedule
    prior_ranges: PriorRanges
    inputs: np.ndarray
    labels: np.ndarray
    labels_normalized: Optional[np.ndarray] = None
    snr: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def validate_shapes(self) -> "TrainingSet":
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[1] != len(self.schedule):
            raise ValueError(
                f"inputs must have shape (n, {len(self.schedule)}), got {self.inputs.shape}"
            )
        if self.labels.shape != (self.inputs.shape[0], 3):
            raise ValueError(
                f"labels must have shape ({self.inputs.shape[0]}, 3), got {self.labels.shape}"
            )
        if self.labels_normalized is None:
            self.labels_normalized = self.prior_ranges.normalize(self.labels)
        if self.snr is not None and self.snr.shape != (self.inputs.shape[0],):
            raise ValueError("snr must have one entry per record")
        return self

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, index: np.ndarray) -> "TrainingSet":
        return TrainingSet(
            schedule=self.schedule,
            prior_ranges=self.prior_ranges,
            inputs=self.inputs[index],
            labels=self.labels[index],
            labels_normalized=self.labels_normalized[index],
            snr=None if self.snr is None else self.snr[index],
        )


class PhantomVolume(BaseModel):
    """
    2D phantom. ``roi_label`` is (height, width) with 0 = background,
    ``truth`` is (height, width, 3) physical and NaN on background,
    ``signals`` is (height, width, n_b), noisy and not normalized.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    width: int = Field(76, ge=1)
    height: int = Field(76, ge=1)
    snr: float = Field(..., gt=0.0)
    schedule: BValueSchedule
    roi_label: np.ndarray
    truth: np.ndarray
    signals: np.ndarray

    @model_validator(mode="after")
    def validate_shapes(self) -> "PhantomVolume":
        shape = (self.height, self.width)
        if self.roi_label.shape != shape:
            raise ValueError(f"roi_label must have shape {shape}, got {self.roi_label.shape}")
        if self.truth.shape != shape + (3,):
            raise ValueError(f"truth must have shape {shape + (3,)}, got {self.truth.shape}")
        if self.signals.shape != shape + (len(self.schedule),):
            raise ValueError(f"signals shape {self.signals.shape} does not match grid and schedule")
        return self

    @property
    def foreground(self) -> np.ndarray:
        return self.roi_label > 0

    @property
    def roi_ids(self) -> np.ndarray:
        labels = np.unique(self.roi_label)
        return labels[labels > 0]
