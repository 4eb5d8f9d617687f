"""
Bi-exponential IVIM signal model, Rician noise and b=0 normalization.

The array forms work on (..., n_b) stacks; the record forms wrap them for a
single voxel.
"""
import numpy as np

from ivuq.exceptions import DegenerateVoxelException, InvalidArgumentException
from ivuq.schemas.ivim import BValueSchedule, IvimParams, SignalRecord


def forward_signals(d, f, d_star, b_values, s0=1.0) -> np.ndarray:
    """
    S(b) = s0 * (f * exp(-b * d_star) + (1 - f) * exp(-b * d))

    d, f, d_star and s0 broadcast against each other; the result gets a
    trailing b-value axis.
    """
    b = np.asarray(b_values, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)[..., None]
    f = np.asarray(f, dtype=np.float64)[..., None]
    d_star = np.asarray(d_star, dtype=np.float64)[..., None]
    s0 = np.asarray(s0, dtype=np.float64)[..., None]
    return s0 * (f * np.exp(-b * d_star) + (1.0 - f) * np.exp(-b * d))


def forward_signal(params: IvimParams, schedule: BValueSchedule, s0: float = 1.0) -> SignalRecord:
    if not params.is_finite() or not np.isfinite(s0):
        raise InvalidArgumentException(
            "IVIM 参数必须为有限值", details={"params": params.model_dump(), "s0": s0}
        )
    if s0 <= 0:
        raise InvalidArgumentException("s0 必须大于0", details={"s0": s0})
    s = forward_signals(params.d, params.f, params.d_star, schedule.as_array(), s0)
    return SignalRecord(schedule=schedule, s=s, normalized=False)


def add_rician_noise_array(signals: np.ndarray, sigma, rng: np.random.Generator) -> np.ndarray:
    """
    |s + n1 + i*n2| with n1, n2 ~ N(0, sigma^2) drawn independently per sample.

    sigma broadcasts over the leading axes (one value per record is the
    usual case: pass shape (n, 1)).
    """
    signals = np.asarray(signals, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise InvalidArgumentException("噪声标准差不能为负")
    sigma = np.broadcast_to(sigma, signals.shape)
    n1 = rng.standard_normal(signals.shape) * sigma
    n2 = rng.standard_normal(signals.shape) * sigma
    return np.sqrt((signals + n1) ** 2 + n2 ** 2)


def add_rician_noise(record: SignalRecord, snr: float, rng: np.random.Generator) -> SignalRecord:
    """sigma = S0_clean / snr, where S0_clean is the record's own b=0 amplitude."""
    if not snr > 0:
        raise InvalidArgumentException("SNR 必须大于0", details={"snr": snr})
    if record.noisy:
        raise InvalidArgumentException("信号已添加过噪声")
    sigma = record.s[0] / snr
    if np.isinf(snr):
        noisy = record.s.copy()
    else:
        noisy = add_rician_noise_array(record.s, sigma, rng)
    return SignalRecord(
        schedule=record.schedule, s=noisy, normalized=False, noisy=True
    )


def normalize_signals(signals: np.ndarray) -> np.ndarray:
    """Divide each row by its b=0 sample; rows with s[0] <= 0 raise."""
    signals = np.asarray(signals, dtype=np.float64)
    s0 = signals[..., :1]
    bad = ~(s0[..., 0] > 0)
    if np.any(bad):
        raise DegenerateVoxelException(
            "b=0 信号不为正，无法归一化", details={"n_degenerate": int(np.sum(bad))}
        )
    out = signals / s0
    out[..., 0] = 1.0
    return out


def degenerate_mask(signals: np.ndarray) -> np.ndarray:
    """Rows that normalize_signals would reject, or that contain non-finite values."""
    signals = np.asarray(signals, dtype=np.float64)
    return ~(signals[..., 0] > 0) | ~np.all(np.isfinite(signals), axis=-1)


def normalize_signal(record: SignalRecord) -> SignalRecord:
    if record.normalized:
        return record
    s = normalize_signals(record.s)
    return SignalRecord(schedule=record.schedule, s=s, normalized=True, noisy=record.noisy)
