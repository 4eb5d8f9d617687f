"""
Synthetic data: training sets and Shepp-Logan phantoms.

Training sets are generated in fixed-size chunks whose random streams are
derived from (master seed, purpose, chunk index), so results do not depend
on the worker count.
"""
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from ivuq.exceptions import InvalidArgumentException
from ivuq.schemas.dataset import N_PHANTOM_ROIS, PhantomVolume, TrainingSet
from ivuq.schemas.ivim import BValueSchedule, PriorRanges
from ivuq.services.ivim_model import add_rician_noise_array, forward_signals, normalize_signals
from ivuq.utils.logger import logger
from ivuq.utils.parallel import run_parallel
from ivuq.utils.seeding import (
    PURPOSE_PHANTOM,
    PURPOSE_SPLIT,
    PURPOSE_TRAINING_SET,
    derive_int_seed,
    derive_rng,
)

CHUNK_SIZE = 10_000
PHANTOM_SIZE = 76

# Canonical ten-ellipse head: (x0, y0, semi-axis a, semi-axis b, rotation in degrees).
SHEPP_LOGAN_ELLIPSES = [
    (0.0, 0.0, 0.69, 0.92, 0.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0),
    (0.22, 0.0, 0.11, 0.31, -18.0),
    (-0.22, 0.0, 0.16, 0.41, 18.0),
    (0.0, 0.35, 0.21, 0.25, 0.0),
    (0.0, 0.1, 0.046, 0.046, 0.0),
    (0.0, -0.1, 0.046, 0.046, 0.0),
    (-0.08, -0.605, 0.046, 0.023, 0.0),
    (0.0, -0.606, 0.023, 0.023, 0.0),
    (0.06, -0.605, 0.023, 0.046, 0.0),
]

# Ellipse index -> ROI label. Later ellipses overwrite earlier ones.
ELLIPSE_LABELS = [1, 2, 3, 4, 5, 5, 5, 6, 6, 6]

RangesLike = Union[PriorRanges, Sequence[Tuple[float, float]]]


def _as_prior_ranges(ranges: Optional[RangesLike]) -> PriorRanges:
    if ranges is None:
        return PriorRanges()
    if isinstance(ranges, PriorRanges):
        return ranges
    try:
        d, f, d_star = ranges
        return PriorRanges.from_tuples(tuple(d), tuple(f), tuple(d_star))
    except ValueError as e:
        raise InvalidArgumentException("参数先验范围无效", details={"ranges": str(ranges), "errors": str(e)}) from e


def _check_snr_range(snr_range: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = (float(v) for v in snr_range)
    if not (0 < lo <= hi):
        raise InvalidArgumentException("SNR 范围无效", details={"snr_range": [lo, hi]})
    return lo, hi


def _warn_unphysical(labels: np.ndarray, where: str) -> None:
    n_bad = int(np.sum(labels[..., 2] < labels[..., 0]))
    if n_bad:
        logger.warning(f"{where}: {n_bad} 组参数 D* < D")


def _nearest_pixel(x0: float, y0: float, size: int) -> Tuple[int, int]:
    row, col = np.clip(np.rint((np.array([y0, x0]) + 1.0) * (size - 1) / 2.0), 0, size - 1).astype(int)
    return int(row), int(col)


def shepp_logan_labels(size: int = PHANTOM_SIZE) -> np.ndarray:
    """
    ROI label map (size, size), uint8, 0 = background.

    Grid spans [-1, 1] in both directions; rows follow y, columns follow x.
    An ellipse that falls between grid points keeps the pixel nearest its
    centre, so all ROI labels are present at every usable size.
    """
    if size < 1:
        raise InvalidArgumentException("体模尺寸必须为正", details={"size": size})
    axis = np.linspace(-1.0, 1.0, size)
    x, y = np.meshgrid(axis, axis)
    labels = np.zeros((size, size), dtype=np.uint8)
    for (x0, y0, a, b, theta), label in zip(SHEPP_LOGAN_ELLIPSES, ELLIPSE_LABELS):
        t = np.radians(theta)
        u = (x - x0) * np.cos(t) + (y - y0) * np.sin(t)
        v = (x - x0) * np.sin(t) - (y - y0) * np.cos(t)
        inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        if inside.any():
            labels[inside] = label
        else:
            labels[_nearest_pixel(x0, y0, size)] = label

    present = np.unique(labels[labels > 0])
    if len(present) != N_PHANTOM_ROIS:
        raise InvalidArgumentException(
            "体模尺寸过小，无法容纳全部 ROI",
            details={"size": size, "labels": present.tolist(), "expected": N_PHANTOM_ROIS},
        )
    return labels


def _uniform_params(rng: np.random.Generator, n: int, ranges: PriorRanges) -> np.ndarray:
    return ranges.lower + ranges.width * rng.random((n, 3))


def _generate_chunk(item) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One training-set chunk: (normalized inputs, physical labels, snr)."""
    seed, chunk_index, n, ranges, b_values, snr_range, noiseless = item
    rng = derive_rng(seed, PURPOSE_TRAINING_SET, chunk_index)
    labels = _uniform_params(rng, n, ranges)
    clean = forward_signals(labels[:, 0], labels[:, 1], labels[:, 2], b_values, 1.0)
    if noiseless:
        return clean, labels, np.full(n, np.inf)
    snr = rng.uniform(snr_range[0], snr_range[1], size=n)
    noisy = add_rician_noise_array(clean, (1.0 / snr)[:, None], rng)
    return normalize_signals(noisy), labels, snr


def sample_training_set(
    n: int,
    ranges: Optional[RangesLike] = None,
    schedule: Optional[BValueSchedule] = None,
    snr_range: Tuple[float, float] = (1.0, 200.0),
    seed: int = 0,
    noiseless: bool = False,
    workers: Optional[int] = None,
) -> TrainingSet:
    """
    n training records. Parameters are drawn i.i.d. uniform over the prior,
    signals synthesized at s0=1, each record gets a uniform SNR from
    snr_range and Rician noise, then is normalized by its noisy b=0 sample.

    Args:
        noiseless: skip the noise (for checks); snr is then inf
        workers: joblib worker count, results do not depend on it
    """
    if n <= 0:
        raise InvalidArgumentException("训练集大小必须为正", details={"n": n})
    ranges = _as_prior_ranges(ranges)
    schedule = schedule or BValueSchedule()
    snr_range = _check_snr_range(snr_range)
    b_values = schedule.as_array()

    items = []
    for chunk_index, start in enumerate(range(0, n, CHUNK_SIZE)):
        size = min(CHUNK_SIZE, n - start)
        items.append((seed, chunk_index, size, ranges, b_values, snr_range, noiseless))
    logger.info(f"生成训练集: n={n}, 分块={len(items)}, SNR={snr_range}, noiseless={noiseless}")
    chunks = run_parallel(_generate_chunk, items, workers=workers, desc="simulate")

    inputs = np.concatenate([c[0] for c in chunks], axis=0)
    labels = np.concatenate([c[1] for c in chunks], axis=0)
    snr = np.concatenate([c[2] for c in chunks], axis=0)
    _warn_unphysical(labels, "训练集")
    return TrainingSet(
        schedule=schedule, prior_ranges=ranges, inputs=inputs, labels=labels, snr=snr
    )


def generate_phantom(
    snr: float,
    ranges: Optional[RangesLike] = None,
    schedule: Optional[BValueSchedule] = None,
    seed: int = 0,
    size: int = PHANTOM_SIZE,
) -> PhantomVolume:
    """
    Shepp-Logan phantom with one uniform parameter draw per ROI.

    Background pixels hold Rician noise around zero at sigma = 1/snr and
    NaN truth.
    """
    if not snr > 0:
        raise InvalidArgumentException("SNR 必须大于0", details={"snr": snr})
    ranges = _as_prior_ranges(ranges)
    schedule = schedule or BValueSchedule()
    rng = np.random.default_rng(seed)

    roi_label = shepp_logan_labels(size)
    roi_params = _uniform_params(rng, N_PHANTOM_ROIS, ranges)
    _warn_unphysical(roi_params, "体模")

    truth = np.full((size, size, 3), np.nan)
    for label in range(1, N_PHANTOM_ROIS + 1):
        truth[roi_label == label] = roi_params[label - 1]

    foreground = roi_label > 0
    clean = np.zeros((size, size, len(schedule)))
    t = truth[foreground]
    clean[foreground] = forward_signals(t[:, 0], t[:, 1], t[:, 2], schedule.as_array(), 1.0)
    signals = add_rician_noise_array(clean, 1.0 / snr, rng)

    return PhantomVolume(
        width=size,
        height=size,
        snr=float(snr),
        schedule=schedule,
        roi_label=roi_label,
        truth=truth,
        signals=signals,
    )


def _generate_phantom_item(item) -> PhantomVolume:
    snr, seed, ranges, schedule, size = item
    return generate_phantom(snr, ranges, schedule, seed, size)


def phantom_seed(seed: int, snr_index: int, index: int) -> int:
    return derive_int_seed(seed, PURPOSE_PHANTOM, snr_index, index)


def generate_phantom_set(
    snrs: Sequence[float] = (25.0, 50.0, 100.0),
    per_snr: int = 200,
    ranges: Optional[RangesLike] = None,
    schedule: Optional[BValueSchedule] = None,
    seed: int = 0,
    size: int = PHANTOM_SIZE,
    workers: Optional[int] = None,
) -> List[PhantomVolume]:
    """Test set ordered by SNR, then phantom index; every phantom has its own derived seed."""
    if per_snr <= 0:
        raise InvalidArgumentException("每个 SNR 的体模数必须为正", details={"per_snr": per_snr})
    ranges = _as_prior_ranges(ranges)
    schedule = schedule or BValueSchedule()
    items = [
        (float(snr), phantom_seed(seed, j, i), ranges, schedule, size)
        for j, snr in enumerate(snrs)
        for i in range(per_snr)
    ]
    logger.info(f"生成体模: SNR={list(snrs)}, 每个 SNR {per_snr} 个, 尺寸 {size}x{size}")
    return run_parallel(_generate_phantom_item, items, workers=workers, desc="phantoms")


def split_train_validation(
    data: TrainingSet, fraction: float = 0.8, seed: int = 0
) -> Tuple[TrainingSet, TrainingSet]:
    """Random disjoint partition, floor(fraction * n) records go to training."""
    if not 0 < fraction < 1:
        raise InvalidArgumentException("划分比例必须在 (0, 1) 之间", details={"fraction": fraction})
    n = len(data)
    # fraction * n can land just below an integer, e.g. 0.1 * 30
    n_train = int(np.floor(round(fraction * n, 9)))
    order = derive_rng(seed, PURPOSE_SPLIT).permutation(n)
    return data.subset(np.sort(order[:n_train])), data.subset(np.sort(order[n_train:]))
