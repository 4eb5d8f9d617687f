"""
Accuracy and probabilistic-quality metrics.

Accuracy: MdAE, MdB, RCV. Forecast quality: prediction intervals, PICP,
calibration curve, miscalibration area, PINAW and empirical CRPS.
Quantiles use linear interpolation between order statistics
(``numpy.quantile(method="linear")``).
"""
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from ivuq.exceptions import EmptyRoiException, InvalidArgumentException, UndefinedRcvException
from ivuq.schemas.metrics import DEFAULT_LEVELS, CalibrationCurve

RCV_SCALE = 1.486

Interval = Tuple[np.ndarray, np.ndarray]


def median_mad(values) -> Tuple[float, float]:
    """Median and (unscaled) median absolute deviation over the finite entries; NaN if none."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    med = float(np.median(v))
    return med, float(np.median(np.abs(v - med)))


def _relative_errors(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise InvalidArgumentException(
            "预测值与真值长度不一致", details={"pred": pred.size, "truth": truth.size}
        )
    keep = (truth != 0) & np.isfinite(truth) & np.isfinite(pred)
    return (pred[keep] - truth[keep]) / truth[keep]


def count_zero_truth(truth) -> int:
    """Voxels excluded from the relative metrics because their truth is 0."""
    return int(np.sum(np.asarray(truth) == 0))


def mdae(pred, truth) -> float:
    """median(|pred - truth| / truth), truth == 0 excluded"""
    rel = _relative_errors(pred, truth)
    return float(np.median(np.abs(rel))) if rel.size else float("nan")


def mdb(pred, truth) -> float:
    """median((pred - truth) / truth), truth == 0 excluded"""
    rel = _relative_errors(pred, truth)
    return float(np.median(rel)) if rel.size else float("nan")


def rcv(values) -> float:
    """1.486 * MAD / median of the values in one ROI."""
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise EmptyRoiException()
    med, mad = median_mad(v)
    if med == 0:
        raise UndefinedRcvException(details={"n_voxels": int(v.size)})
    return RCV_SCALE * mad / med


def prediction_interval(samples, gamma: float, axis: int = -1) -> Interval:
    """
    Central gamma% interval: the (100-gamma)/2 and (100+gamma)/2 empirical
    percentiles along ``axis``. gamma=100 gives (min, max).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[axis] < 2:
        raise InvalidArgumentException("预测区间至少需要2个样本")
    if not 0 < gamma <= 100:
        raise InvalidArgumentException("置信水平必须在 (0, 100] 之间", details={"gamma": gamma})
    q = np.array([(100.0 - gamma) / 200.0, (100.0 + gamma) / 200.0])
    lower, upper = np.quantile(samples, q, axis=axis, method="linear")
    return lower, upper


def picp(intervals: Interval, truths) -> float:
    """Fraction of truths inside the closed intervals."""
    lower, upper = (np.asarray(a, dtype=np.float64) for a in intervals)
    truths = np.asarray(truths, dtype=np.float64)
    if not (lower.shape == upper.shape == truths.shape):
        raise InvalidArgumentException(
            "区间与真值数量不一致",
            details={"lower": list(lower.shape), "upper": list(upper.shape), "truths": list(truths.shape)},
        )
    if truths.size == 0:
        return float("nan")
    return float(np.mean((truths >= lower) & (truths <= upper)))


def miscalibration_area(curve: CalibrationCurve) -> float:
    """
    Area between |observed - nominal| and zero over the evaluated levels,
    divided by the span of the levels (unit-interval area of the gap).
    """
    nominal = curve.nominal_fraction
    if nominal.size < 2:
        raise InvalidArgumentException("校准曲线至少需要2个水平")
    gap = np.abs(np.asarray(curve.observed_picp, dtype=np.float64) - nominal)
    return float(trapezoid(gap, nominal) / (nominal[-1] - nominal[0]))


def calibration_curve(
    samples,
    truths,
    levels: Optional[Sequence[float]] = None,
    axis: int = -1,
) -> CalibrationCurve:
    """
    Observed PICP at each nominal level (percent), plus the miscalibration
    area in percent.

    Args:
        samples: predictive samples, the sample axis given by ``axis``
        truths: one truth per forecast (samples with ``axis`` removed)
    """
    levels = list(DEFAULT_LEVELS if levels is None else levels)
    truths = np.asarray(truths, dtype=np.float64)
    observed = [picp(prediction_interval(samples, g, axis=axis), truths) for g in levels]
    curve = CalibrationCurve(nominal_levels=levels, observed_picp=observed)
    curve.miscalibration_area = 100.0 * miscalibration_area(curve)
    return curve


def pinaw(intervals: Interval, truth_range: float, gamma: Optional[float] = None) -> float:
    """Mean interval width / R. ``gamma`` only labels the interval level."""
    if not truth_range > 0:
        raise InvalidArgumentException("PINAW 归一化范围必须为正", details={"R": truth_range, "gamma": gamma})
    lower, upper = (np.asarray(a, dtype=np.float64) for a in intervals)
    return float(np.mean(upper - lower) / truth_range)


def crps_empirical(samples, y, axis: int = -1) -> np.ndarray:
    """
    Energy-form CRPS: mean|x - y| - 1/(2 S^2) sum_ij |x_i - x_j|.

    The pairwise sum uses the sorted-sample identity
    sum_ij |x_i - x_j| = 2 sum_k (2k - S - 1) x_(k), k = 1..S.
    Returns a scalar for one forecast, else an array over the other axes.
    """
    x = np.moveaxis(np.asarray(samples, dtype=np.float64), axis, -1)
    s = x.shape[-1]
    if s < 2:
        raise InvalidArgumentException("CRPS 至少需要2个样本")
    y = np.asarray(y, dtype=np.float64)
    term1 = np.mean(np.abs(x - y[..., None]), axis=-1)
    weights = 2.0 * np.arange(1, s + 1) - s - 1.0
    term2 = np.sum(np.sort(x, axis=-1) * weights, axis=-1) / (s * s)
    out = np.maximum(term1 - term2, 0.0)
    return float(out) if out.ndim == 0 else out
