"""
Regression heads: point (sigmoid + MSE), heteroscedastic Gaussian and
mixture density (factorized per IVIM parameter).

Raw output layout, every block parameter-major (D, f, D*):
    point     [means (3)]
    gaussian  [means (3) | std raws (3)]
    mdn       [means (3K) | std raws (3K) | logits (3K)]
A Gaussian raw vector is therefore the first 6 entries of a K=1 MDN vector.
"""
from typing import Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax, logsumexp, softmax

from ivuq.exceptions import InvalidArgumentException
from ivuq.schemas.ivim import IvimParams, PriorRanges
from ivuq.schemas.network import HeadKind, HeadSpec
from ivuq.schemas.prediction import MixturePrediction

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _check_width(raw: np.ndarray, spec: HeadSpec) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1:] != (spec.output_width,):
        raise InvalidArgumentException(
            "网络输出宽度与输出头不匹配",
            details={"got": list(raw.shape), "expected": spec.output_width, "head": spec.kind.value},
        )
    return raw


def split_raw(raw: np.ndarray, spec: HeadSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean raws, std raws, logits), each (..., 3, K). Gaussian logits are zeros."""
    raw = _check_width(raw, spec)
    lead = raw.shape[:-1]
    k = spec.k
    if spec.kind == HeadKind.GAUSSIAN:
        return (
            raw[..., 0:3].reshape(lead + (3, 1)),
            raw[..., 3:6].reshape(lead + (3, 1)),
            np.zeros(lead + (3, 1)),
        )
    if spec.kind == HeadKind.MDN:
        return (
            raw[..., 0:3 * k].reshape(lead + (3, k)),
            raw[..., 3 * k:6 * k].reshape(lead + (3, k)),
            raw[..., 6 * k:9 * k].reshape(lead + (3, k)),
        )
    raise InvalidArgumentException("点估计输出头没有混合参数")


def decode_head(raw: np.ndarray, spec: HeadSpec) -> Union[MixturePrediction, np.ndarray]:
    """
    Point head: sigmoid triple(s). Probabilistic heads: MixturePrediction with
    softmax weights per parameter, sigmoid means and softplus(z) + floor stds.
    Works on a single raw vector or a batch (..., width).
    """
    raw = _check_width(raw, spec)
    if spec.kind == HeadKind.POINT:
        return expit(raw)
    mean_raw, std_raw, logits = split_raw(raw, spec)
    return MixturePrediction(
        weights=softmax(logits, axis=-1),
        means=expit(mean_raw),
        stds=softplus(std_raw) + spec.sigma_floor,
    )


def gaussian_raw_to_mdn(raw: np.ndarray) -> np.ndarray:
    """Embed Gaussian raw outputs (..., 6) as K=1 MDN raw outputs (..., 9)."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.concatenate([raw, np.zeros(raw.shape[:-1] + (3,))], axis=-1)


def loss_mse(pred: np.ndarray, label: np.ndarray) -> float:
    """Mean over the batch of the summed squared error across the 3 parameters."""
    diff = np.atleast_2d(np.asarray(pred, dtype=np.float64) - np.asarray(label, dtype=np.float64))
    return float(np.mean(np.sum(diff ** 2, axis=-1)))


def loss_nll_gaussian(mean: np.ndarray, std: np.ndarray, label: np.ndarray) -> float:
    """-sum_p log N(y_p | mean_p, std_p^2), averaged over the batch."""
    mean, std, y = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (mean, std, label))
    nll = np.log(std) + LOG_SQRT_2PI + 0.5 * ((y - mean) / std) ** 2
    return float(np.mean(np.sum(nll, axis=-1)))


def _component_log_density(pred: MixturePrediction, label: np.ndarray) -> np.ndarray:
    """log pi_k + log N(y | mu_k, sigma_k^2), shape (..., 3, K)."""
    y = np.asarray(label, dtype=np.float64)[..., None]
    with np.errstate(divide="ignore"):
        log_w = np.log(pred.weights)
    return log_w - np.log(pred.stds) - LOG_SQRT_2PI - 0.5 * ((y - pred.means) / pred.stds) ** 2


def loss_nll_mixture(pred: MixturePrediction, label: np.ndarray) -> float:
    """-sum_p log sum_k pi_k N(y_p | mu_k, sigma_k^2) via log-sum-exp, averaged over the batch."""
    log_mix = logsumexp(_component_log_density(pred, label), axis=-1)
    return float(np.mean(np.atleast_2d(-np.sum(log_mix, axis=-1))))


class PointHead:
    """Sigmoid outputs trained with MSE."""

    def __init__(self, spec: HeadSpec = None):
        self.spec = spec or HeadSpec.point()

    def decode(self, raw: np.ndarray) -> np.ndarray:
        return decode_head(raw, self.spec)

    def loss(self, raw: np.ndarray, y: np.ndarray) -> float:
        return loss_mse(self.decode(raw), y)

    def loss_and_grad(self, raw: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        raw = np.atleast_2d(_check_width(raw, self.spec))
        y = np.atleast_2d(y)
        n = raw.shape[0]
        pred = expit(raw)
        grad = 2.0 * (pred - y) * pred * (1.0 - pred) / n
        return loss_mse(pred, y), grad


class GaussianHead:
    """Single Gaussian per parameter; heteroscedastic NLL."""

    def __init__(self, spec: HeadSpec = None):
        self.spec = spec or HeadSpec.gaussian()

    def decode(self, raw: np.ndarray) -> MixturePrediction:
        return decode_head(raw, self.spec)

    def _moments(self, raw: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return expit(raw[..., 0:3]), softplus(raw[..., 3:6]) + self.spec.sigma_floor

    def loss(self, raw: np.ndarray, y: np.ndarray) -> float:
        raw = _check_width(raw, self.spec)
        mean, std = self._moments(raw)
        return loss_nll_gaussian(mean, std, y)

    def loss_and_grad(self, raw: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        raw = np.atleast_2d(_check_width(raw, self.spec))
        y = np.atleast_2d(y)
        n = raw.shape[0]
        mean, std = self._moments(raw)
        resid = y - mean
        d_mean = -resid / std ** 2
        d_std = 1.0 / std - resid ** 2 / std ** 3
        grad = np.concatenate(
            [d_mean * mean * (1.0 - mean), d_std * expit(raw[..., 3:6])], axis=-1
        ) / n
        return loss_nll_gaussian(mean, std, y), grad


class MixtureDensityHead:
    """K-component mixture per parameter; mixture NLL with log-sum-exp."""

    def __init__(self, spec: HeadSpec = None):
        self.spec = spec or HeadSpec.mdn()

    def decode(self, raw: np.ndarray) -> MixturePrediction:
        return decode_head(raw, self.spec)

    def loss(self, raw: np.ndarray, y: np.ndarray) -> float:
        return loss_nll_mixture(self.decode(raw), y)

    def loss_and_grad(self, raw: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]:
        raw = np.atleast_2d(_check_width(raw, self.spec))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        n = raw.shape[0]
        mean_raw, std_raw, logits = split_raw(raw, self.spec)
        mean = expit(mean_raw)
        std = softplus(std_raw) + self.spec.sigma_floor
        log_w = log_softmax(logits, axis=-1)

        resid = y[..., None] - mean
        log_comp = log_w - np.log(std) - LOG_SQRT_2PI - 0.5 * (resid / std) ** 2
        log_mix = logsumexp(log_comp, axis=-1, keepdims=True)
        resp = np.exp(log_comp - log_mix)
        value = float(np.mean(-np.sum(log_mix[..., 0], axis=-1)))

        d_logit = np.exp(log_w) - resp
        d_mean = -resp * resid / std ** 2 * mean * (1.0 - mean)
        d_std = resp * (1.0 / std - resid ** 2 / std ** 3) * expit(std_raw)
        grad = np.concatenate(
            [d_mean.reshape(n, -1), d_std.reshape(n, -1), d_logit.reshape(n, -1)], axis=-1
        ) / n
        return value, grad


def make_head(spec: HeadSpec):
    if spec.kind == HeadKind.POINT:
        return PointHead(spec)
    if spec.kind == HeadKind.GAUSSIAN:
        return GaussianHead(spec)
    return MixtureDensityHead(spec)


def map_normalized(pred: MixturePrediction) -> np.ndarray:
    """Mean of the highest-weight component per parameter (..., 3); ties go to the lowest index."""
    best = np.argmax(pred.weights, axis=-1)[..., None]
    return np.take_along_axis(pred.means, best, axis=-1)[..., 0]


def map_point_estimates(
    pred: Union[MixturePrediction, np.ndarray], ranges: PriorRanges
) -> np.ndarray:
    """Physical MAP estimates (..., 3); point-head triples are denormalized directly."""
    if isinstance(pred, MixturePrediction):
        return ranges.denormalize(map_normalized(pred))
    return ranges.denormalize(pred)


def map_point_estimate(pred: Union[MixturePrediction, np.ndarray], ranges: PriorRanges) -> IvimParams:
    return IvimParams.from_array(map_point_estimates(pred, ranges))


def sample_predictions(pred: MixturePrediction, s: int, rng: np.random.Generator) -> np.ndarray:
    """
    s draws per voxel from a batch of mixtures (n, 3, K) -> (n, s, 3),
    normalized space, not clamped.
    """
    if s < 1:
        raise InvalidArgumentException("采样数必须 >= 1", details={"s": s})
    weights = pred.weights.reshape((-1, 3, pred.k))
    means = pred.means.reshape(weights.shape)
    stds = pred.stds.reshape(weights.shape)
    n = weights.shape[0]

    u = rng.random((n, s, 3))
    cdf = np.cumsum(weights, axis=-1)[:, None, :, :]
    comp = np.minimum(np.sum(u[..., None] > cdf, axis=-1), pred.k - 1)[..., None]
    z = rng.standard_normal((n, s, 3))

    mu = np.take_along_axis(np.broadcast_to(means[:, None], (n, s, 3, pred.k)), comp, axis=-1)[..., 0]
    sd = np.take_along_axis(np.broadcast_to(stds[:, None], (n, s, 3, pred.k)), comp, axis=-1)[..., 0]
    return mu + sd * z


def sample_prediction(pred: MixturePrediction, s: int, rng: np.random.Generator) -> np.ndarray:
    """s triples from one voxel's mixture, shape (s, 3)."""
    return sample_predictions(pred, s, rng).reshape(s, 3)
