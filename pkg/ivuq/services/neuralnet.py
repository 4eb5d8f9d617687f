"""
Dense feed-forward network: affine -> ELU -> affine -> ELU -> affine.

Weights are stored as (out, in) matrices and inputs as row batches (n, in),
so a layer is ``x @ W.T + b``. All arithmetic is float64.
"""
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np

from ivuq.exceptions import InvalidArgumentException, NumericalFailureException
from ivuq.schemas.dataset import TrainingSet
from ivuq.schemas.network import HeadSpec, LossHistory, TrainConfig
from ivuq.utils.logger import logger
from ivuq.utils.parallel import progress
from ivuq.utils.seeding import derive_rng

ELU_ALPHA = 1.0
HIDDEN_WIDTH = 64

# Sub-streams of the network seed.
INIT_STREAM = 0
SHUFFLE_STREAM = 1

VALIDATION_CHUNK = 8192


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, z, ELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: np.ndarray) -> np.ndarray:
    # equals elu(z) + alpha for z < 0
    return np.where(z >= 0, 1.0, ELU_ALPHA * np.exp(np.minimum(z, 0.0)))


class LossFunction(Protocol):
    def loss(self, raw: np.ndarray, y: np.ndarray) -> float: ...

    def loss_and_grad(self, raw: np.ndarray, y: np.ndarray) -> Tuple[float, np.ndarray]: ...


class DenseNetwork:
    """Two hidden ELU layers; the output layer is linear (heads decode it)."""

    def __init__(
        self,
        layer_sizes: Sequence[int],
        weights: List[np.ndarray],
        biases: List[np.ndarray],
        seed: int = 0,
        head: Optional[HeadSpec] = None,
    ):
        self.layer_sizes = _check_layer_sizes(layer_sizes)
        if len(weights) != 3 or len(biases) != 3:
            raise InvalidArgumentException("网络必须包含3个仿射层")
        for i, (w, b) in enumerate(zip(weights, biases)):
            expected = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != expected or b.shape != (expected[0],):
                raise InvalidArgumentException(
                    f"第 {i + 1} 层参数形状错误",
                    details={"weight": list(w.shape), "bias": list(b.shape), "expected": list(expected)},
                )
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.seed = int(seed)
        self.head = head

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> List[np.ndarray]:
        """W1, b1, W2, b2, W3, b3 (the persisted order)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_parameters(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_parameters,):
            raise InvalidArgumentException(
                "参数向量长度不匹配", details={"got": list(flat.shape), "expected": self.n_parameters}
            )
        offset = 0
        for p in self.parameters():
            p[...] = flat[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            seed=self.seed,
            head=self.head,
        )


def _check_layer_sizes(layer_sizes: Sequence[int]) -> List[int]:
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) != 4:
        raise InvalidArgumentException(
            "网络必须恰好有两个隐藏层", details={"layer_sizes": sizes}
        )
    if any(s < 1 for s in sizes):
        raise InvalidArgumentException("层宽必须为正", details={"layer_sizes": sizes})
    return sizes


def init_network(
    layer_sizes: Sequence[int], seed: int, head: Optional[HeadSpec] = None
) -> DenseNetwork:
    """
    He-uniform fan-in initialization: W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)),
    biases zero. Layers are drawn in order, each row-major, from the seed's
    init stream.
    """
    sizes = _check_layer_sizes(layer_sizes)
    rng = derive_rng(seed, INIT_STREAM)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return DenseNetwork(sizes, weights, biases, seed=seed, head=head)


def _check_input(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.input_size,):
        raise InvalidArgumentException(
            "输入长度与网络不匹配", details={"got": list(x.shape), "expected": net.input_size}
        )
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentException("网络输入包含非有限值")
    return x


def forward_cached(net: DenseNetwork, x: np.ndarray) -> Tuple[np.ndarray, Tuple[np.ndarray, ...]]:
    """Forward pass that keeps (x, z1, a1, z2, a2) for backward."""
    x = _check_input(net, x)
    w1, w2, w3 = net.weights
    b1, b2, b3 = net.biases
    z1 = x @ w1.T + b1
    a1 = elu(z1)
    z2 = a1 @ w2.T + b2
    a2 = elu(z2)
    raw = a2 @ w3.T + b3
    return raw, (x, z1, a1, z2, a2)


def forward(net: DenseNetwork, x: np.ndarray) -> np.ndarray:
    """Raw output; a single signal (n_b,) gives (out,), a batch (n, n_b) gives (n, out)."""
    return forward_cached(net, x)[0]


def backward(
    net: DenseNetwork,
    x: np.ndarray,
    upstream: np.ndarray,
    cache: Optional[Tuple[np.ndarray, ...]] = None,
) -> List[np.ndarray]:
    """
    Gradients of <upstream, forward(net, x)> w.r.t. W1, b1, W2, b2, W3, b3.

    Batched inputs sum the per-row contributions.
    """
    if cache is None:
        _, cache = forward_cached(net, x)
    x, z1, a1, z2, a2 = (np.atleast_2d(c) for c in cache)
    dy = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    w1, w2, w3 = net.weights

    dw3 = dy.T @ a2
    db3 = dy.sum(axis=0)
    dz2 = (dy @ w3) * elu_grad(z2)
    dw2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    dz1 = (dz2 @ w2) * elu_grad(z1)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    return [dw1, db1, dw2, db2, dw3, db3]


class AdamOptimizer:
    """Adam with bias correction; updates parameter arrays in place."""

    def __init__(
        self,
        params: List[np.ndarray],
        learning_rate: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: List[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def evaluate_loss(net: DenseNetwork, loss: LossFunction, data: TrainingSet) -> float:
    """Mean loss over a whole set, evaluated in chunks."""
    n = len(data)
    total = 0.0
    for start in range(0, n, VALIDATION_CHUNK):
        stop = min(start + VALIDATION_CHUNK, n)
        raw = forward(net, data.inputs[start:stop])
        total += loss.loss(raw, data.labels_normalized[start:stop]) * (stop - start)
    return total / n


def train(
    net: DenseNetwork,
    loss: LossFunction,
    data: TrainingSet,
    cfg: TrainConfig,
    validation: Optional[TrainingSet] = None,
    desc: str = "train",
) -> Tuple[DenseNetwork, LossHistory]:
    """
    Mini-batch Adam for cfg.epochs epochs over a reshuffled order each epoch.
    The final short batch is used. Returns a trained copy; ``net`` itself is
    not modified.

    Raises:
        NumericalFailureException: non-finite loss or parameters, with epoch and batch
    """
    if len(data) == 0:
        raise InvalidArgumentException("训练数据为空")
    if data.inputs.shape[1] != net.input_size:
        raise InvalidArgumentException(
            "训练数据的 b 值数量与网络输入不匹配",
            details={"data": int(data.inputs.shape[1]), "network": net.input_size},
        )
    net = net.copy()
    params = net.parameters()
    optimizer = AdamOptimizer(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = derive_rng(cfg.seed, SHUFFLE_STREAM)
    history = LossHistory()
    n = len(data)
    x_all = data.inputs
    y_all = data.labels_normalized

    for epoch in progress(range(cfg.epochs), desc=desc, total=cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            raw, cache = forward_cached(net, x_all[idx])
            value, upstream = loss.loss_and_grad(raw, y_all[idx])
            if not np.isfinite(value):
                raise NumericalFailureException(
                    "训练损失出现非有限值",
                    details={"epoch": epoch, "batch": batch, "loss": float(value)},
                )
            grads = backward(net, None, upstream, cache=cache)
            optimizer.step(grads)
            if not net.is_finite():
                raise NumericalFailureException(
                    "网络参数出现非有限值", details={"epoch": epoch, "batch": batch}
                )
            epoch_total += value * len(idx)

        history.train_loss.append(epoch_total / n)
        history.validation_loss.append(
            evaluate_loss(net, loss, validation) if validation is not None and len(validation) else None
        )
        if epoch == 0 or (epoch + 1) % 100 == 0:
            logger.debug(
                f"[{desc}] epoch {epoch + 1}/{cfg.epochs}: train={history.train_loss[-1]:.6f}, "
                f"val={history.validation_loss[-1]}"
            )
    return net, history
