"""
Voxel-wise prediction: ensemble or segmented-fit baseline -> PredictionMap
(+ mixture sidecar).

Background, out-of-mask and degenerate voxels (non-positive or non-finite
b=0 signal) are not predicted and are stored as NaN.
"""
from typing import Optional, Tuple

import numpy as np

from ivuq.exceptions import ScheduleMismatchException
from ivuq.schemas.ivim import BValueSchedule
from ivuq.schemas.network import BASELINE_TAG, HEAD_TAGS
from ivuq.schemas.prediction import MixturePrediction, MixtureSidecar, PredictionMap
from ivuq.services.baseline_fit import DEFAULT_B_THRESHOLD, fit_segmented_array
from ivuq.services.ensemble import (
    DeepEnsemble,
    decompose_member_moments,
    ensemble_map,
    member_moments,
    member_predictions,
    sample_member_mixtures,
)
from ivuq.services.ivim_model import degenerate_mask, normalize_signals
from ivuq.utils.logger import logger
from ivuq.utils.parallel import run_parallel

PREDICT_CHUNK = 4096

Dims = Tuple[int, int, int]


def check_schedule(model_schedule: BValueSchedule, input_values, source: str = "") -> None:
    """Refuse inputs acquired with a different b-value schedule than the model."""
    if not model_schedule.matches(input_values):
        raise ScheduleMismatchException(
            f"b 值序列与模型不一致: {source}",
            details={
                "model_b_values": model_schedule.values,
                "input_b_values": [float(b) for b in np.asarray(input_values).ravel()],
                "source": source,
            },
        )


def select_voxels(signals: np.ndarray, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Boolean selection over the flattened voxels (N,): inside the mask and
    not degenerate.
    """
    degenerate = degenerate_mask(signals)
    keep = ~degenerate
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        keep &= mask
        n_degenerate = int(np.sum(degenerate & mask))
    else:
        n_degenerate = int(np.sum(degenerate))
    if n_degenerate:
        logger.warning(f"跳过 {n_degenerate} 个退化体素")
    return keep


def _empty_maps(n_voxels: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return tuple(np.full((n_voxels, 3), np.nan) for _ in range(3))


def _predict_chunk(item):
    ens, x, percent = item
    outputs = member_predictions(ens, x)
    means, variances = member_moments(outputs)
    au, eu = decompose_member_moments(means, variances)
    scale = 100.0 if percent else 1.0
    mixtures = None
    if isinstance(outputs[0], MixturePrediction):
        mixtures = (
            np.stack([p.weights for p in outputs]),
            np.stack([p.means for p in outputs]),
            np.stack([p.stds for p in outputs]),
        )
    return ensemble_map(outputs, ens.prior_ranges), au * scale, eu * scale, mixtures


def predict_with_ensemble(
    ens: DeepEnsemble,
    signals: np.ndarray,
    dims: Dims,
    mask: Optional[np.ndarray] = None,
    workers: Optional[int] = None,
    percent: bool = True,
) -> Tuple[PredictionMap, Optional[MixtureSidecar]]:
    """
    Predict every selected voxel of a (N, n_b) raw signal stack, N = prod(dims).

    Returns:
        the prediction map and, for probabilistic heads, the per-member
        mixtures of the predicted voxels
    """
    signals = np.asarray(signals, dtype=np.float64).reshape(-1, len(ens.schedule))
    keep = select_voxels(signals, mask)
    index = np.flatnonzero(keep)
    x = normalize_signals(signals[index]) if index.size else np.zeros((0, len(ens.schedule)))

    map_estimate, au, eu = _empty_maps(signals.shape[0])
    sidecar = None
    if index.size:
        items = [(ens, x[start:start + PREDICT_CHUNK], percent) for start in range(0, len(x), PREDICT_CHUNK)]
        results = run_parallel(_predict_chunk, items, workers=workers, desc="predict")
        map_estimate[index] = np.concatenate([r[0] for r in results])
        au[index] = np.concatenate([r[1] for r in results])
        eu[index] = np.concatenate([r[2] for r in results])
        if results[0][3] is not None:
            sidecar = MixtureSidecar(
                voxel_index=index.astype(np.int64),
                weights=np.concatenate([r[3][0] for r in results], axis=1),
                means=np.concatenate([r[3][1] for r in results], axis=1),
                stds=np.concatenate([r[3][2] for r in results], axis=1),
                lower=ens.prior_ranges.lower,
                upper=ens.prior_ranges.upper,
            )
    logger.info(f"集成预测完成: {index.size}/{signals.shape[0]} 个体素, head={ens.head.kind.value}")
    prediction = PredictionMap(
        kind_tag=HEAD_TAGS[ens.head.kind],
        dims=tuple(dims),
        map_estimate=map_estimate.reshape(tuple(dims) + (3,)),
        au=au.reshape(tuple(dims) + (3,)),
        eu=eu.reshape(tuple(dims) + (3,)),
    )
    return prediction, sidecar


def predict_with_baseline(
    signals: np.ndarray,
    b_values,
    dims: Dims,
    mask: Optional[np.ndarray] = None,
    b_threshold: float = DEFAULT_B_THRESHOLD,
    refine: bool = True,
    workers: Optional[int] = None,
) -> PredictionMap:
    """Segmented least-squares maps; AU and EU are NaN."""
    b = np.asarray(b_values, dtype=np.float64)
    signals = np.asarray(signals, dtype=np.float64).reshape(-1, b.shape[0])
    keep = select_voxels(signals, mask)
    index = np.flatnonzero(keep)
    map_estimate, au, eu = _empty_maps(signals.shape[0])
    if index.size:
        params, _, _ = fit_segmented_array(
            normalize_signals(signals[index]), b, b_threshold, refine, workers
        )
        map_estimate[index] = params
    shape = tuple(dims) + (3,)
    return PredictionMap(
        kind_tag=BASELINE_TAG,
        dims=tuple(dims),
        map_estimate=map_estimate.reshape(shape),
        au=au.reshape(shape),
        eu=eu.reshape(shape),
    )


def sample_sidecar(
    sidecar: MixtureSidecar,
    s_per_member: int,
    rng: np.random.Generator,
    select: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Pooled M*S draws for the stored voxels (or the ``select`` subset of
    them), in physical units: (n, M*S, 3).
    """
    members = [sidecar.member(m) for m in range(sidecar.m)]
    if select is not None:
        members = [p.voxel(select) for p in members]
    samples = sample_member_mixtures(members, s_per_member, rng)
    return samples * (sidecar.upper - sidecar.lower) + sidecar.lower
