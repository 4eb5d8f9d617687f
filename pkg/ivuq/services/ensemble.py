"""
Deep ensembles: member training, pooled predictive mixtures, AU/EU split.

AU/EU come from the analytic moments of each member's mixture (law of total
variance), not from samples; the M*S sample pool only feeds quantile-based
metrics. Everything here lives in normalized [0,1] space.
"""
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ivuq.exceptions import (
    InvalidArgumentException,
    NumericalFailureException,
    UndefinedUncertaintyException,
)
from ivuq.schemas.dataset import TrainingSet
from ivuq.schemas.ivim import BValueSchedule, PriorRanges
from ivuq.schemas.network import HeadSpec, LossHistory, TrainConfig
from ivuq.schemas.prediction import EnsemblePrediction, MixturePrediction
from ivuq.services.neuralnet import HIDDEN_WIDTH, DenseNetwork, forward, init_network, train
from ivuq.services.prob_heads import decode_head, make_head, map_normalized, sample_predictions
from ivuq.utils.logger import logger
from ivuq.utils.parallel import run_parallel

MemberOutput = Union[MixturePrediction, np.ndarray]


class DeepEnsemble:
    """M members sharing architecture, head, prior ranges and b-value schedule."""

    def __init__(
        self,
        members: List[DenseNetwork],
        head: HeadSpec,
        prior_ranges: PriorRanges,
        schedule: BValueSchedule,
        member_seeds: Optional[List[int]] = None,
        histories: Optional[List[LossHistory]] = None,
    ):
        if not members:
            raise InvalidArgumentException("集成至少需要一个成员")
        sizes = {tuple(m.layer_sizes) for m in members}
        if len(sizes) != 1:
            raise InvalidArgumentException("集成成员结构不一致", details={"layer_sizes": sorted(sizes)})
        if members[0].output_size != head.output_width:
            raise InvalidArgumentException(
                "成员输出宽度与输出头不匹配",
                details={"output": members[0].output_size, "head_width": head.output_width},
            )
        if members[0].input_size != len(schedule):
            raise InvalidArgumentException("成员输入宽度与 b 值序列长度不匹配")
        self.members = members
        self.head = head
        self.prior_ranges = prior_ranges
        self.schedule = schedule
        self.member_seeds = list(member_seeds) if member_seeds is not None else [m.seed for m in members]
        self.histories = histories or []

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def layer_sizes(self) -> List[int]:
        return list(self.members[0].layer_sizes)


def member_seed(base_seed: int, index: int) -> int:
    return int(base_seed) + int(index)


def _train_member(item) -> Tuple[Any, ...]:
    index, head, data, validation, cfg, hidden_width = item
    seed = cfg.seed
    net = init_network([data.inputs.shape[1], hidden_width, hidden_width, head.output_width], seed, head)
    try:
        trained, history = train(net, make_head(head), data, cfg, validation, desc=f"member {index}")
    except NumericalFailureException as e:
        # IvuqException subclasses do not unpickle across the joblib boundary
        return "error", index, e.message, e.details
    return "ok", index, trained, history


def train_ensemble(
    spec: HeadSpec,
    data: TrainingSet,
    cfg: TrainConfig,
    m: int = 5,
    base_seed: int = 0,
    validation: Optional[TrainingSet] = None,
    hidden_width: int = HIDDEN_WIDTH,
    workers: Optional[int] = None,
) -> DeepEnsemble:
    """
    Train m members on the same data; member i uses seed base_seed + i for
    both initialization and shuffling.

    Raises:
        InvalidArgumentException: m < 2
        NumericalFailureException: a member diverged (details carry the member index)
    """
    if m < 2:
        raise InvalidArgumentException("集成成员数必须 >= 2", details={"m": m})
    seeds = [member_seed(base_seed, i) for i in range(m)]
    items = [
        (i, spec, data, validation, cfg.model_copy(update={"seed": seed}), hidden_width)
        for i, seed in enumerate(seeds)
    ]
    logger.info(
        f"训练集成: head={spec.kind.value}, K={spec.k}, M={m}, epochs={cfg.epochs}, n={len(data)}"
    )
    results = run_parallel(_train_member, items, workers=workers, desc="ensemble")

    members, histories = [], []
    for status, index, payload, extra in results:
        if status == "error":
            details = dict(extra)
            details["member"] = index
            raise NumericalFailureException(f"集成成员 {index} 训练失败: {payload}", details=details)
        members.append(payload)
        histories.append(extra)
        logger.info(f"成员 {index} 完成: final train loss={extra.train_loss[-1]:.6f}")
    return DeepEnsemble(members, spec, data.prior_ranges, data.schedule, seeds, histories)


def member_predictions(ens: DeepEnsemble, x: np.ndarray) -> List[MemberOutput]:
    """Decoded head output of every member for a batch of normalized signals (n, n_b)."""
    x = np.atleast_2d(x)
    return [decode_head(forward(net, x), ens.head) for net in ens.members]


def mixture_moments(pred: MixturePrediction) -> Tuple[np.ndarray, np.ndarray]:
    """Per parameter: mean = sum pi mu, variance = sum pi (sigma^2 + (mu - mean)^2)."""
    mean = np.sum(pred.weights * pred.means, axis=-1)
    var = np.sum(pred.weights * (pred.stds ** 2 + (pred.means - mean[..., None]) ** 2), axis=-1)
    return mean, var


def pool_mixtures(preds: Sequence[MixturePrediction]) -> MixturePrediction:
    """Uniform mixture over members: components concatenated, weights pi / M."""
    m = len(preds)
    if m == 0:
        raise InvalidArgumentException("没有可池化的成员预测")
    return MixturePrediction(
        weights=np.concatenate([p.weights for p in preds], axis=-1) / m,
        means=np.concatenate([p.means for p in preds], axis=-1),
        stds=np.concatenate([p.stds for p in preds], axis=-1),
    )


def decompose_member_moments(
    means: np.ndarray, variances: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    AU = sqrt(mean_m var_m), EU = sqrt(mean_m (mean_m - mean_bar)^2).

    Args:
        means: member means stacked on axis 0, (M, ..., 3)
        variances: same shape; None for point members (AU is then NaN)
    """
    means = np.asarray(means, dtype=np.float64)
    if means.shape[0] < 2:
        raise UndefinedUncertaintyException(details={"m": int(means.shape[0])})
    eu = np.sqrt(np.mean((means - means.mean(axis=0)) ** 2, axis=0))
    if variances is None:
        au = np.full_like(eu, np.nan)
    else:
        au = np.sqrt(np.mean(np.asarray(variances, dtype=np.float64), axis=0))
    return au, eu


def member_moments(outputs: List[MemberOutput]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if isinstance(outputs[0], MixturePrediction):
        moments = [mixture_moments(p) for p in outputs]
        return np.stack([mu for mu, _ in moments]), np.stack([var for _, var in moments])
    return np.stack(outputs), None


def _scale(values: np.ndarray, percent: bool) -> np.ndarray:
    return values * 100.0 if percent else values


def decompose_uncertainty(
    ens: DeepEnsemble, x: np.ndarray, percent: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """
    (AU, EU) per voxel and parameter, (n, 3). Standard deviations relative
    to the prior range width, in percent unless percent=False.
    """
    means, variances = member_moments(member_predictions(ens, x))
    au, eu = decompose_member_moments(means, variances)
    return _scale(au, percent), _scale(eu, percent)


def sample_member_mixtures(
    preds: Sequence[MixturePrediction], s_per_member: int, rng: np.random.Generator
) -> np.ndarray:
    """S draws from every member, pooled without weighting: (n, M*S, 3), members in order."""
    return np.concatenate([sample_predictions(p, s_per_member, rng) for p in preds], axis=1)


def pooled_sample(
    ens: DeepEnsemble, x: np.ndarray, s_per_member: int, rng: np.random.Generator
) -> np.ndarray:
    if not ens.head.is_probabilistic:
        raise InvalidArgumentException("点估计集成无法采样预测分布")
    return sample_member_mixtures(member_predictions(ens, x), s_per_member, rng)


def ensemble_map(outputs: List[MemberOutput], ranges: PriorRanges) -> np.ndarray:
    """Mean of member MAPs in normalized space, denormalized: (n, 3)."""
    if isinstance(outputs[0], MixturePrediction):
        maps = np.stack([map_normalized(p) for p in outputs])
    else:
        maps = np.stack(outputs)
    return ranges.denormalize(maps.mean(axis=0))


def predict_ensemble(
    ens: DeepEnsemble,
    x: np.ndarray,
    s_per_member: int = 0,
    rng: Optional[np.random.Generator] = None,
    percent: bool = True,
) -> EnsemblePrediction:
    """MAP (physical), AU and EU for a batch; samples drawn only when s_per_member > 0."""
    outputs = member_predictions(ens, x)
    means, variances = member_moments(outputs)
    au, eu = decompose_member_moments(means, variances)
    samples = None
    if s_per_member > 0 and ens.head.is_probabilistic:
        if rng is None:
            raise InvalidArgumentException("采样需要随机数生成器")
        samples = sample_member_mixtures(outputs, s_per_member, rng)
    return EnsemblePrediction(
        map_estimate=ensemble_map(outputs, ens.prior_ranges),
        au=_scale(au, percent),
        eu=_scale(eu, percent),
        samples=samples,
    )


def k_sweep(
    ks: Sequence[int],
    data: TrainingSet,
    validation: TrainingSet,
    cfg: TrainConfig,
    m: int = 5,
    base_seed: int = 0,
    hidden_width: int = HIDDEN_WIDTH,
    workers: Optional[int] = None,
) -> List[Dict[str, Any]]:
    """Train m MDN members per K; report the mean (and spread) of the final validation loss."""
    if validation is None or len(validation) == 0:
        raise InvalidArgumentException("K 扫描需要验证集")
    rows = []
    for k in ks:
        ens = train_ensemble(
            HeadSpec.mdn(int(k)), data, cfg, m, base_seed, validation, hidden_width, workers
        )
        losses = np.array([h.final_validation_loss for h in ens.histories], dtype=np.float64)
        rows.append({
            "k": int(k),
            "mean_validation_loss": float(losses.mean()),
            "std_validation_loss": float(losses.std()),
            "m": m,
        })
        logger.info(f"K={k}: 平均验证损失={losses.mean():.6f}")
    return rows
