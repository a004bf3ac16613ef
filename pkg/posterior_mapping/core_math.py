"""Deterministic numerical kernels.

Probability-vector operations (flooring, KL divergence, entropy), and small
feed-forward softmax networks with hand-written backpropagation, trained by
seeded mini-batch SGD. Everything is float64 and natural-log (nats).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import entr, logsumexp, rel_entr, softmax, xlogy
from tqdm import tqdm

from .config import Activation, TrainConfig
from .errors import (
    DimensionMismatchError,
    DivergenceError,
    EmptyInputError,
    InvalidDistributionError,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-10
SUM_TOLERANCE = 1e-6
KL_NEGATIVE_TOLERANCE = 1e-9
RNG_ALGORITHM = "philox"

# Independent random streams drawn from one seed.
_RNG_PURPOSES = {"init": 0, "shuffle": 1, "sample": 2, "split": 3}

# Rows evaluated at once when scoring a whole data set.
_EVAL_CHUNK = 8192


def make_rng(seed: int, purpose: str) -> np.random.Generator:
    """Counter-based (Philox) generator for one purpose of one seed."""
    seq = np.random.SeedSequence(int(seed), spawn_key=(_RNG_PURPOSES[purpose],))
    return np.random.Generator(np.random.Philox(seq))


# ============================================================================
# Probability vectors
# ============================================================================

def check_distributions(p, name: str = "p") -> np.ndarray:
    """Validate a vector (or rows of a matrix) as probability distributions."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise InvalidDistributionError(f"{name} must be a nonempty vector or matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidDistributionError(f"{name} contains non-finite values")
    if (arr < 0).any():
        raise InvalidDistributionError(f"{name} contains negative entries")
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > SUM_TOLERANCE):
        raise InvalidDistributionError(f"{name} does not sum to 1 (within {SUM_TOLERANCE})")
    return arr


def floor_distributions(q, floor: float = PROB_FLOOR) -> np.ndarray:
    """Floor entries at ``floor`` and renormalize the rows that needed it.

    Rows with no entry below the floor are returned untouched.
    """
    q = np.asarray(q, dtype=np.float64)
    rows = np.atleast_2d(q)
    low = (rows < floor).any(axis=1)
    if low.any():
        rows = rows.copy()
        fixed = np.maximum(rows[low], floor)
        rows[low] = fixed / fixed.sum(axis=1, keepdims=True)
    return rows.reshape(q.shape)


def kl_rows(p, q, clamp: bool = True) -> np.ndarray:
    """Per-row KL(p_t || q_t) in nats for two aligned matrices.

    Identical rows give exactly 0, whatever the floor does to q.
    """
    p = check_distributions(np.atleast_2d(p), "p")
    q = check_distributions(np.atleast_2d(q), "q")
    if p.shape != q.shape:
        raise DimensionMismatchError(f"shape mismatch: {p.shape} vs {q.shape}")
    values = rel_entr(p, floor_distributions(q)).sum(axis=1)
    values[(p == q).all(axis=1)] = 0.0
    if clamp:
        values = np.where((values < 0) & (values >= -KL_NEGATIVE_TOLERANCE), 0.0, values)
    return values


def kl_divergence(p, q) -> float:
    """KL(p || q) = sum_k p_k (ln p_k - ln q_k), with q floored first."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.ndim != 1 or q.ndim != 1:
        raise DimensionMismatchError("kl_divergence expects two vectors")
    return float(kl_rows(p, q)[0])


def mean_kl(targets, mapped) -> float:
    """Mean per-frame KL(target_t || mapped_t) over T frames."""
    targets = np.asarray(targets, dtype=np.float64)
    mapped = np.asarray(mapped, dtype=np.float64)
    if targets.size == 0 or mapped.size == 0:
        raise EmptyInputError("mean_kl needs at least one frame")
    if len(targets) != len(mapped):
        raise DimensionMismatchError(f"{len(targets)} target frames vs {len(mapped)} mapped frames")
    return float(kl_rows(targets, mapped).mean())


def entropy_rows(p) -> np.ndarray:
    p = check_distributions(np.atleast_2d(p))
    return entr(p).sum(axis=1)


def entropy(p) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise DimensionMismatchError("entropy expects a vector")
    return float(entropy_rows(p)[0])


def argmax_rows(p) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.atleast_2d(p), axis=1)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ============================================================================
# Feed-forward networks
# ============================================================================

@dataclass
class NetworkParams:
    """Weights of a feed-forward softmax network.

    ``weights[i]`` has shape ``(layer_dims[i], layer_dims[i + 1])`` and is
    applied as ``x @ W + b``. The output layer always goes through softmax.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        self.activation = Activation(self.activation)
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise DimensionMismatchError(f"invalid layer_dims {self.layer_dims}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise DimensionMismatchError(f"expected {n_layers} weight matrices and bias vectors")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise DimensionMismatchError(
                    f"layer {i}: weights {w.shape}, biases {b.shape}, expected {expected}"
                )

    @classmethod
    def initialize(cls, layer_dims, activation: Activation = Activation.TANH, seed: int = 0) -> "NetworkParams":
        rng = make_rng(seed, "init")
        activation = Activation(activation)
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            gain = 2.0 if activation is Activation.RELU else 1.0
            weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(tuple(layer_dims), weights, biases, activation)

    @classmethod
    def zeros(cls, layer_dims, activation: Activation = Activation.TANH) -> "NetworkParams":
        weights = [np.zeros((a, b)) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
        biases = [np.zeros(b) for b in layer_dims[1:]]
        return cls(tuple(layer_dims), weights, biases, activation)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> list[np.ndarray]:
        """Parameter arrays in layer order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.layer_dims,
            [np.array(w, dtype=np.float64, order="C") for w in self.weights],
            [np.array(b, dtype=np.float64, order="C") for b in self.biases],
            self.activation,
        )

    def freeze(self) -> "NetworkParams":
        for arr in self.parameters():
            arr.flags.writeable = False
        return self

    def equals(self, other: "NetworkParams") -> bool:
        """Bitwise equality of architecture and parameters."""
        return (
            self.layer_dims == other.layer_dims
            and self.activation == other.activation
            and all(np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters()))
        )


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(h: np.ndarray, activation: Activation) -> np.ndarray:
    # Expressed through the activation output h.
    if activation is Activation.RELU:
        return (h > 0).astype(np.float64)
    return 1.0 - h * h


def _check_inputs(net: NetworkParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise DimensionMismatchError(f"input of shape {x.shape} does not match input dim {net.input_dim}")
    return x


def _hidden_states(net: NetworkParams, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    acts = [x]
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = _activate(h @ w + b, net.activation)
        acts.append(h)
    logits = h @ net.weights[-1] + net.biases[-1]
    return acts, logits


def forward(net: NetworkParams, inputs) -> np.ndarray:
    """Softmax output for one input vector or a batch of row vectors."""
    x = _check_inputs(net, inputs)
    _, logits = _hidden_states(net, np.atleast_2d(x))
    probs = softmax(logits, axis=1)
    return probs[0] if x.ndim == 1 else probs


def forward_batched(net: NetworkParams, inputs, chunk: int = _EVAL_CHUNK) -> np.ndarray:
    x = _check_inputs(net, np.atleast_2d(inputs))
    if len(x) == 0:
        return np.zeros((0, net.output_dim))
    return np.concatenate([forward(net, x[i : i + chunk]) for i in range(0, len(x), chunk)])


def loss_and_gradients(net: NetworkParams, inputs, targets, l2_penalty: float = 0.0):
    """Mean KL(target || net(input)) plus 0.5 * l2 * sum(W**2), and its gradients.

    Gradients are returned in ``net.parameters()`` order.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    batch = len(x)
    if batch == 0:
        return 0.0, [np.zeros_like(p) for p in net.parameters()]

    acts, logits = _hidden_states(net, x)
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    loss = float((xlogy(t, t) - t * log_probs).sum() / batch)
    if l2_penalty:
        loss += 0.5 * l2_penalty * sum(float((w * w).sum()) for w in net.weights)

    delta = (np.exp(log_probs) * t.sum(axis=1, keepdims=True) - t) / batch
    grads_w, grads_b = [], []
    for layer in range(len(net.weights) - 1, -1, -1):
        w = net.weights[layer]
        grad_w = acts[layer].T @ delta
        if l2_penalty:
            grad_w = grad_w + l2_penalty * w
        grads_w.append(grad_w)
        grads_b.append(delta.sum(axis=0))
        if layer > 0:
            delta = (delta @ w.T) * _activation_grad(acts[layer], net.activation)

    grads = []
    for grad_w, grad_b in zip(reversed(grads_w), reversed(grads_b)):
        grads.extend((grad_w, grad_b))
    return loss, grads


def dataset_kl(net: NetworkParams, inputs, targets, chunk: int = _EVAL_CHUNK) -> float:
    """Mean KL(target || net(input)) over a whole data set, without the L2 term."""
    total = 0.0
    for i in range(0, len(inputs), chunk):
        batch = inputs[i : i + chunk]
        total += _loss_only(net, batch, targets[i : i + chunk]) * len(batch)
    return total / len(inputs)


def _loss_only(net: NetworkParams, inputs, targets) -> float:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    _, logits = _hidden_states(net, x)
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    return float((xlogy(t, t) - t * log_probs).sum() / len(x))


def gradient_check(
    net: NetworkParams,
    inputs,
    targets,
    l2_penalty: float = 0.0,
    step: float = 1e-5,
    gradient_fn: Optional[Callable] = None,
) -> float:
    """Max relative deviation between analytic and central-difference gradients.

    Meant for small networks (a few hundred parameters): every parameter is
    perturbed in turn. ``gradient_fn`` replaces the analytic gradient, which
    lets tests feed in a deliberately broken one.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.size == 0:
        return 0.0
    gradient_fn = gradient_fn or loss_and_gradients
    _, analytic = gradient_fn(net, inputs, targets, l2_penalty)

    work = net.copy()
    worst = 0.0
    for param, grad in zip(work.parameters(), analytic):
        flat = param.reshape(-1)
        grad_flat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            loss_plus, _ = loss_and_gradients(work, inputs, targets, l2_penalty)
            flat[i] = original - step
            loss_minus, _ = loss_and_gradients(work, inputs, targets, l2_penalty)
            flat[i] = original
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            deviation = abs(grad_flat[i] - numeric) / max(1e-8, abs(grad_flat[i]) + abs(numeric))
            worst = max(worst, deviation)
    return worst


# ============================================================================
# Training
# ============================================================================

@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_kl: float
    val_kl: float


@dataclass
class TrainResult:
    net: NetworkParams
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def loss_history(self) -> list[float]:
        return [stats.train_kl for stats in self.history]

    @property
    def best_val_kl(self) -> float:
        return self.history[self.best_epoch].val_kl


def _as_matrix(data, name: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be a 2-D array, got shape {arr.shape}")
    return arr


def train(
    net: NetworkParams,
    inputs,
    target_dists,
    val_inputs=None,
    val_targets=None,
    cfg: TrainConfig = TrainConfig(),
    verbose: bool = False,
    desc: str = "train",
) -> TrainResult:
    """Fit ``net`` by mini-batch SGD on mean KL(target || net(input)).

    The caller's parameters are not modified. The returned network is the
    one from the epoch with the lowest validation KL (training KL when no
    validation set is given); epoch 0 is the untouched initialization.
    """
    x = _as_matrix(inputs, "inputs")
    t = _as_matrix(target_dists, "target_dists")
    if len(x) == 0:
        raise EmptyInputError("no training data")
    if len(x) != len(t):
        raise DimensionMismatchError(f"{len(x)} inputs vs {len(t)} targets")
    if x.shape[1] != net.input_dim or t.shape[1] != net.output_dim:
        raise DimensionMismatchError(
            f"data dims ({x.shape[1]}, {t.shape[1]}) do not match network {net.layer_dims}"
        )
    has_val = val_inputs is not None and len(val_inputs) > 0
    if has_val:
        xv = _as_matrix(val_inputs, "val_inputs")
        tv = _as_matrix(val_targets, "val_targets")
        if len(xv) != len(tv) or xv.shape[1] != x.shape[1] or tv.shape[1] != t.shape[1]:
            raise DimensionMismatchError("validation data does not match training data")

    work = net.copy()
    rng = make_rng(cfg.rng_seed, "shuffle")

    def evaluate(epoch: int) -> EpochStats:
        train_kl = dataset_kl(work, x, t)
        val_kl = dataset_kl(work, xv, tv) if has_val else train_kl
        if not (np.isfinite(train_kl) and np.isfinite(val_kl)):
            raise DivergenceError(epoch, train_kl if not np.isfinite(train_kl) else val_kl)
        return EpochStats(epoch, train_kl, val_kl)

    history = [evaluate(0)]
    best, best_epoch = work.copy(), 0
    since_best = 0

    epochs = tqdm(range(1, cfg.max_epochs + 1), desc=desc, disable=not verbose, leave=False)
    for epoch in epochs:
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_gradients(work, x[idx], t[idx], cfg.l2_penalty)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            if cfg.learning_rate > 0:
                for param, grad in zip(work.parameters(), grads):
                    param -= cfg.learning_rate * grad

        stats = evaluate(epoch)
        history.append(stats)
        epochs.set_postfix(train_kl=f"{stats.train_kl:.4f}", val_kl=f"{stats.val_kl:.4f}")
        logger.debug("%s epoch %d: train KL %.5f, val KL %.5f", desc, epoch, stats.train_kl, stats.val_kl)

        if stats.val_kl < history[best_epoch].val_kl:
            best, best_epoch = work.copy(), epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= max(1, cfg.early_stop_patience):
                logger.debug("%s: early stop at epoch %d (best %d)", desc, epoch, best_epoch)
                break

    return TrainResult(best.freeze(), history, best_epoch)
