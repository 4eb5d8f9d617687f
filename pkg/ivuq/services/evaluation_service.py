"""
Metric report assembly.

Phantom mode: PhantomScores per (model, phantom), then median / MAD per SNR
stratum plus "all".
- MdAE, MdB: per phantom over foreground voxels, then across phantoms
- RCV: per phantom and ROI, then across phantoms
- CRPS, AU, EU: per voxel, then aggregated
- PINAW90: mean interval width / R per phantom, R = truth range of the whole test set
- calibration curve and miscalibration area: all voxels of a stratum pooled
ROI mode: mask only, no truth; medians, RCV and AU/EU.
"""
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from ivuq.exceptions import EmptyRoiException, InvalidArgumentException, UndefinedRcvException
from ivuq.schemas.dataset import PhantomVolume
from ivuq.schemas.ivim import PARAMETER_NAMES
from ivuq.schemas.metrics import (
    DEFAULT_LEVELS,
    AccuracyRow,
    CalibrationCurve,
    CalibrationRow,
    DecompositionRow,
    MetricReport,
    RoiRow,
    UncertaintyQualityRow,
)
from ivuq.schemas.prediction import MixtureSidecar, PredictionMap
from ivuq.services.prediction_service import sample_sidecar
from ivuq.services.uq_metrics import (
    count_zero_truth,
    crps_empirical,
    mdae,
    mdb,
    median_mad,
    miscalibration_area,
    prediction_interval,
    rcv,
)
from ivuq.utils.logger import logger

ALL_STRATUM = "all"
PINAW_GAMMA = 90.0


def snr_label(snr: float) -> str:
    return f"{snr:g}"


class PhantomScores:
    """Per-phantom partial results for one model."""

    def __init__(self, snr: float, n_levels: int):
        self.snr = snr
        self.mdae = np.full(3, np.nan)
        self.mdb = np.full(3, np.nan)
        self.n_excluded = np.zeros(3, dtype=int)
        self.rcv: List[List[float]] = [[], [], []]
        self.au = np.empty((0, 3))
        self.eu = np.empty((0, 3))
        self.crps: Optional[np.ndarray] = None
        self.mean_width90: Optional[np.ndarray] = None
        self.covered: Optional[np.ndarray] = None
        self.n_calibration = 0
        self.truth_min = np.full(3, np.inf)
        self.truth_max = np.full(3, -np.inf)
        self.n_levels = n_levels


def score_phantom(
    phantom: PhantomVolume,
    prediction: PredictionMap,
    mixtures: Optional[MixtureSidecar] = None,
    samples_per_member: int = 100,
    rng: Optional[np.random.Generator] = None,
    levels: Sequence[float] = DEFAULT_LEVELS,
) -> PhantomScores:
    """
    Score one prediction file against its phantom. Background and skipped
    voxels are excluded. Sampling metrics need ``mixtures`` and ``rng``.
    """
    scores = PhantomScores(phantom.snr, len(levels))
    truth_all = phantom.truth.reshape(-1, 3)
    labels = phantom.roi_label.reshape(-1)
    est_all = prediction.flat("map_estimate")
    if est_all.shape[0] != truth_all.shape[0]:
        raise InvalidArgumentException(
            "预测文件与体模尺寸不一致",
            details={"prediction_voxels": int(est_all.shape[0]), "phantom_voxels": int(truth_all.shape[0])},
        )
    keep = (labels > 0) & np.all(np.isfinite(est_all), axis=-1)
    truth, est = truth_all[keep], est_all[keep]

    foreground_truth = truth_all[labels > 0]
    scores.truth_min = np.nanmin(foreground_truth, axis=0)
    scores.truth_max = np.nanmax(foreground_truth, axis=0)

    for p in range(3):
        scores.mdae[p] = mdae(est[:, p], truth[:, p])
        scores.mdb[p] = mdb(est[:, p], truth[:, p])
        scores.n_excluded[p] = count_zero_truth(truth[:, p])
        for roi in np.unique(labels[keep]):
            try:
                scores.rcv[p].append(rcv(est_all[keep & (labels == roi), p]))
            except (UndefinedRcvException, EmptyRoiException):
                continue

    scores.au = prediction.flat("au")[keep]
    scores.eu = prediction.flat("eu")[keep]

    if mixtures is not None and rng is not None:
        flat_keep = np.flatnonzero(keep)
        stored = np.isin(mixtures.voxel_index, flat_keep)
        voxel_index = mixtures.voxel_index[stored]
        samples = sample_sidecar(mixtures, samples_per_member, rng, stored)
        y = truth_all[voxel_index]

        scores.crps = np.stack([crps_empirical(samples[..., p], y[:, p]) for p in range(3)], axis=-1)
        lower90, upper90 = prediction_interval(samples, PINAW_GAMMA, axis=1)
        scores.mean_width90 = np.mean(upper90 - lower90, axis=0)
        covered = np.zeros((len(levels), 3), dtype=np.int64)
        for i, gamma in enumerate(levels):
            lo, hi = prediction_interval(samples, gamma, axis=1)
            covered[i] = np.sum((y >= lo) & (y <= hi), axis=0)
        scores.covered = covered
        scores.n_calibration = int(y.shape[0])
    return scores


def truth_range(scores: Iterable[PhantomScores]) -> np.ndarray:
    """Per-parameter ground-truth range over the whole test set (R of PINAW)."""
    scores = list(scores)
    lo = np.min([s.truth_min for s in scores], axis=0)
    hi = np.max([s.truth_max for s in scores], axis=0)
    return hi - lo


def _strata(scores: List[PhantomScores]) -> Dict[str, List[PhantomScores]]:
    strata: Dict[str, List[PhantomScores]] = {}
    for s in sorted(scores, key=lambda s: s.snr):
        strata.setdefault(snr_label(s.snr), []).append(s)
    strata[ALL_STRATUM] = list(scores)
    return strata


def aggregate_scores(
    model: str,
    scores: List[PhantomScores],
    levels: Sequence[float] = DEFAULT_LEVELS,
    ranges: Optional[np.ndarray] = None,
) -> MetricReport:
    """Summarize one model's phantom scores per SNR stratum and overall."""
    report = MetricReport()
    if not scores:
        return report
    ranges = truth_range(scores) if ranges is None else ranges
    for stratum, group in _strata(scores).items():
        for p, name in enumerate(PARAMETER_NAMES):
            mdae_med, mdae_mad = median_mad([s.mdae[p] for s in group])
            mdb_med, mdb_mad = median_mad([s.mdb[p] for s in group])
            rcv_med, rcv_mad = median_mad([v for s in group for v in s.rcv[p]])
            report.accuracy.append(AccuracyRow(
                model=model, parameter=name, snr=stratum,
                mdae_median=mdae_med, mdae_mad=mdae_mad,
                mdb_median=mdb_med, mdb_mad=mdb_mad,
                rcv_median=rcv_med, rcv_mad=rcv_mad,
                n_phantoms=len(group),
                n_excluded=int(sum(s.n_excluded[p] for s in group)),
            ))

            au = np.concatenate([s.au[:, p] for s in group])
            eu = np.concatenate([s.eu[:, p] for s in group])
            if np.any(np.isfinite(au)) or np.any(np.isfinite(eu)):
                au_med, au_mad = median_mad(au)
                eu_med, eu_mad = median_mad(eu)
                report.decomposition.append(DecompositionRow(
                    model=model, parameter=name, snr=stratum,
                    au_median=au_med, au_mad=au_mad, eu_median=eu_med, eu_mad=eu_mad,
                ))

            sampled = [s for s in group if s.covered is not None and s.n_calibration > 0]
            if not sampled:
                continue
            crps_med, crps_mad = median_mad(np.concatenate([s.crps[:, p] for s in sampled]))
            pinaw = [s.mean_width90[p] / ranges[p] for s in sampled] if ranges[p] > 0 else []
            pinaw_med, pinaw_mad = median_mad(pinaw)
            n_total = sum(s.n_calibration for s in sampled)
            observed = [sum(int(s.covered[i, p]) for s in sampled) / n_total for i in range(len(levels))]
            curve = CalibrationCurve(nominal_levels=list(levels), observed_picp=observed)
            curve.miscalibration_area = 100.0 * miscalibration_area(curve)
            report.uncertainty_quality.append(UncertaintyQualityRow(
                model=model, parameter=name, snr=stratum,
                crps_median=crps_med, crps_mad=crps_mad,
                pinaw90_median=pinaw_med, pinaw90_mad=pinaw_mad,
                miscalibration_area=curve.miscalibration_area,
            ))
            for nominal, obs in zip(curve.nominal_levels, curve.observed_picp):
                report.calibration.append(CalibrationRow(
                    model=model, parameter=name, snr=stratum, nominal=nominal, observed=obs,
                ))
    logger.info(f"模型 {model}: 汇总 {len(scores)} 个体模")
    return report


def evaluate_roi(model: str, prediction: PredictionMap, mask: np.ndarray) -> List[RoiRow]:
    """Median/MAD, RCV and AU/EU medians of the predicted maps inside a mask (no truth)."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != prediction.n_voxels:
        raise InvalidArgumentException("掩膜与预测网格尺寸不一致", details={"model": model})
    inside = mask & prediction.valid.reshape(-1)
    if not np.any(inside):
        raise EmptyRoiException(details={"model": model, "mask_voxels": int(mask.sum())})
    est = prediction.flat("map_estimate")[inside]
    au = prediction.flat("au")[inside]
    eu = prediction.flat("eu")[inside]
    rows = []
    for p, name in enumerate(PARAMETER_NAMES):
        med, mad = median_mad(est[:, p])
        try:
            roi_rcv = rcv(est[:, p])
        except UndefinedRcvException:
            roi_rcv = None
        au_med = median_mad(au[:, p])[0]
        eu_med = median_mad(eu[:, p])[0]
        rows.append(RoiRow(
            model=model, parameter=name, n_voxels=int(inside.sum()),
            median=med, mad=mad, rcv=roi_rcv,
            au_median=None if np.isnan(au_med) else au_med,
            eu_median=None if np.isnan(eu_med) else eu_med,
        ))
    return rows


def merge_reports(reports: Iterable[MetricReport]) -> MetricReport:
    merged = MetricReport()
    for r in reports:
        merged.accuracy.extend(r.accuracy)
        merged.uncertainty_quality.extend(r.uncertainty_quality)
        merged.calibration.extend(r.calibration)
        merged.decomposition.extend(r.decomposition)
        merged.roi.extend(r.roi)
    return merged


REPORT_TABLES = {
    "accuracy": AccuracyRow,
    "uncertainty_quality": UncertaintyQualityRow,
    "calibration": CalibrationRow,
    "decomposition": DecompositionRow,
    "roi": RoiRow,
}


def report_frames(report: MetricReport) -> Dict[str, pd.DataFrame]:
    """One DataFrame per non-empty table, columns in schema order."""
    frames = {}
    for name, row_type in REPORT_TABLES.items():
        rows = getattr(report, name)
        if rows:
            frames[name] = pd.DataFrame([r.model_dump() for r in rows], columns=list(row_type.model_fields))
    return frames
