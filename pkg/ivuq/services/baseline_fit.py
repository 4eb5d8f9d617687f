"""
Segmented least-squares IVIM fit (classical baseline).

1. log-linear fit of the high-b tail (b > b_threshold) gives D and the
   intercept; f = 1 - intercept
2. D and f fixed, bounded Brent search for D* on [0, 0.5]
3. optional: bounded joint nonlinear least squares (trust-region reflective)
   started from the segmented result, kept only when the SSE drops
"""
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.optimize import least_squares, minimize_scalar

from ivuq.exceptions import InvalidArgumentException
from ivuq.schemas.common import FitResult
from ivuq.schemas.ivim import IvimParams, SignalRecord
from ivuq.services.ivim_model import forward_signals
from ivuq.utils.logger import logger
from ivuq.utils.parallel import run_parallel

LOWER_BOUNDS = np.array([0.0, 0.0, 0.0])
UPPER_BOUNDS = np.array([0.005, 1.0, 0.5])
DEFAULT_B_THRESHOLD = 200.0

# SSE below this is round-off; the joint polish is skipped.
ROUNDOFF_SSE = 1e-24
POLISH_D_STAR_STARTS = (0.01, 0.05, 0.2)
FIT_CHUNK = 256


def _sse(params: np.ndarray, b: np.ndarray, s: np.ndarray) -> float:
    model = forward_signals(params[0], params[1], params[2], b)
    return float(np.sum((model - s) ** 2))


def _residuals(params: np.ndarray, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    return forward_signals(params[0], params[1], params[2], b) - s


def _jacobian(params: np.ndarray, b: np.ndarray, s: np.ndarray) -> np.ndarray:
    d, f, d_star = params
    e_d = np.exp(-b * d)
    e_p = np.exp(-b * d_star)
    return np.stack([-(1.0 - f) * b * e_d, e_p - e_d, -f * b * e_p], axis=1)


def _check_schedule(b: np.ndarray, b_threshold: float) -> np.ndarray:
    high = b > b_threshold
    if np.sum(high) < 3 or np.sum(~high) < 2:
        raise InvalidArgumentException(
            "分段拟合需要阈值以上至少3个、以下至少2个 b 值",
            details={"b_values": b.tolist(), "b_threshold": b_threshold},
        )
    return high


def _stage_one(b: np.ndarray, s: np.ndarray, high: np.ndarray) -> Tuple[float, float, bool]:
    """(D, f, ok) from the log-linear fit of the high-b tail."""
    b_high, s_high = b[high], s[high]
    positive = (s_high > 0) & np.isfinite(s_high)
    if not np.all(positive):
        if np.sum(positive) < 2:
            return 0.0, 0.0, False
        slope, intercept = np.polyfit(b_high[positive], np.log(s_high[positive]), 1)
        return float(-slope), float(1.0 - np.exp(intercept)), False
    slope, intercept = np.polyfit(b_high, np.log(s_high), 1)
    return float(-slope), float(1.0 - np.exp(intercept)), True


def _polish(
    start: np.ndarray, b: np.ndarray, s: np.ndarray
) -> Tuple[Optional[np.ndarray], float, int]:
    best, best_sse, nfev = None, np.inf, 0
    starts = [start] + [np.array([start[0], start[1], d]) for d in POLISH_D_STAR_STARTS]
    for x0 in starts:
        x0 = np.clip(x0, LOWER_BOUNDS, UPPER_BOUNDS)
        result = least_squares(
            _residuals,
            x0,
            jac=_jacobian,
            bounds=(LOWER_BOUNDS, UPPER_BOUNDS),
            method="trf",
            x_scale=np.array([1e-3, 1e-1, 1e-2]),
            ftol=1e-14,
            xtol=1e-14,
            gtol=1e-14,
            max_nfev=2000,
            args=(b, s),
        )
        nfev += int(result.nfev)
        sse = float(2.0 * result.cost)
        if result.success and sse < best_sse:
            best, best_sse = result.x, sse
    return best, best_sse, nfev


def _fit_signal(
    s: np.ndarray, b: np.ndarray, b_threshold: float, refine: bool
) -> Tuple[np.ndarray, float, bool, int]:
    high = _check_schedule(b, b_threshold)
    d, f, ok = _stage_one(b, s, high)
    d = float(np.clip(d, LOWER_BOUNDS[0], UPPER_BOUNDS[0]))
    f = float(np.clip(f, LOWER_BOUNDS[1], UPPER_BOUNDS[1]))
    if not ok:
        params = np.array([d, f, LOWER_BOUNDS[2]])
        return params, _sse(params, b, s), False, 1

    try:
        search = minimize_scalar(
            lambda d_star: _sse(np.array([d, f, d_star]), b, s),
            bounds=(LOWER_BOUNDS[2], UPPER_BOUNDS[2]),
            method="bounded",
            options={"xatol": 1e-10, "maxiter": 500},
        )
    except (ValueError, FloatingPointError) as e:
        logger.debug(f"D* 搜索失败: {e}")
        params = np.array([d, f, LOWER_BOUNDS[2]])
        return params, _sse(params, b, s), False, 1

    params = np.array([d, f, float(search.x)])
    sse = _sse(params, b, s)
    iterations = 1 + int(search.nfev)
    converged = bool(search.success)

    if refine and sse > ROUNDOFF_SSE:
        try:
            polished, polished_sse, nfev = _polish(params, b, s)
        except (ValueError, FloatingPointError) as e:
            logger.debug(f"联合拟合失败: {e}")
            polished, polished_sse, nfev = None, np.inf, 0
        iterations += nfev
        if polished is not None and polished_sse < sse:
            params, sse = polished, polished_sse

    params = np.clip(params, LOWER_BOUNDS, UPPER_BOUNDS)
    return params, _sse(params, b, s), converged, iterations


def fit_segmented(
    record: Union[SignalRecord, np.ndarray],
    b_threshold: float = DEFAULT_B_THRESHOLD,
    b_values: Optional[np.ndarray] = None,
    refine: bool = True,
) -> FitResult:
    """
    Fit one normalized signal.

    Args:
        record: normalized SignalRecord, or a bare signal with ``b_values``
        refine: run the joint polish after the two segmented stages
    """
    if isinstance(record, SignalRecord):
        b = record.schedule.as_array()
        s = record.s
    else:
        if b_values is None:
            raise InvalidArgumentException("裸信号需要提供 b 值")
        b = np.asarray(b_values, dtype=np.float64)
        s = np.asarray(record, dtype=np.float64)
    params, sse, converged, iterations = _fit_signal(s, b, b_threshold, refine)
    return FitResult(
        params=IvimParams.from_array(params),
        residual=sse,
        converged=converged,
        iterations=iterations,
    )


def _fit_chunk(item) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    signals, b, b_threshold, refine = item
    n = signals.shape[0]
    params = np.zeros((n, 3))
    residual = np.zeros(n)
    converged = np.zeros(n, dtype=bool)
    for i in range(n):
        params[i], residual[i], converged[i], _ = _fit_signal(signals[i], b, b_threshold, refine)
    return params, residual, converged


def fit_segmented_array(
    signals: np.ndarray,
    b_values,
    b_threshold: float = DEFAULT_B_THRESHOLD,
    refine: bool = True,
    workers: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Fit many normalized signals (n, n_b); voxels are split into fixed
    chunks for the worker pool.

    Returns:
        params (n, 3), residual SSE (n,), converged flags (n,)
    """
    signals = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    b = np.asarray(b_values, dtype=np.float64)
    _check_schedule(b, b_threshold)
    if signals.shape[0] == 0:
        return np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=bool)
    items: List = [
        (signals[start:start + FIT_CHUNK], b, b_threshold, refine)
        for start in range(0, signals.shape[0], FIT_CHUNK)
    ]
    results = run_parallel(_fit_chunk, items, workers=workers, desc="lsq")
    params = np.concatenate([r[0] for r in results])
    residual = np.concatenate([r[1] for r in results])
    converged = np.concatenate([r[2] for r in results])
    logger.info(f"分段拟合完成: {len(params)} 个体素, 未收敛 {int(np.sum(~converged))}")
    return params, residual, converged
