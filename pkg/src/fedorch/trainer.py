"""Reference local learner: a small sigmoid classifier trained with Adam.

The model is a logistic regression or small tanh MLP over a TensorMap of
float32 parameters. All arithmetic runs in float64 and parameters are rounded
back to float32 after every optimizer step, so a training run is a pure
function of (initial weights, data, seeds, config) and two runs with the same
inputs produce bit-identical weights. That purity is what the federation's
fault-equivalence guarantees stand on: retraining an interrupted round
reproduces the exact update that was lost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyBatch,
    EmptySplit,
    InvalidSpec,
    NonFiniteLoss,
    StructureMismatch,
)
from .tensors import TensorMap

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class ModelSpec:
    """Architecture + init seed. Empty hidden_dims means logistic regression."""

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise InvalidSpec(f"input_dim must be >= 1, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise InvalidSpec(f"hidden layer widths must be >= 1, got {self.hidden_dims}")
        if self.seed < 0:
            raise InvalidSpec("seed must be nonnegative")


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    min_lr: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise InvalidSpec("learning_rate must be positive and batch_size >= 1")
        if not 0 < self.plateau_factor < 1 or self.plateau_patience < 1:
            raise InvalidSpec("plateau_factor in (0,1) and plateau_patience >= 1 required")


@dataclass(frozen=True)
class OptimizerState:
    """Adam accumulators; moments are float64 arrays shaped like the weights."""

    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class PlateauScheduler:
    """Counts non-improving validation evaluations; cuts LR by `factor` at `patience`."""

    factor: float = 0.1
    patience: int = 10
    min_lr: float = 0.0
    best_loss: float = math.inf
    evals_since_improvement: int = 0


@dataclass(frozen=True)
class TrainerCarry:
    """Optimizer and scheduler state threaded across chained training calls."""

    optimizer: OptimizerState
    scheduler: PlateauScheduler
    epochs_done: int = 0


@dataclass(frozen=True)
class TrainReport:
    epochs_run: int
    final_train_loss: float
    final_val_loss: float
    sample_count: int
    weights: TensorMap
    carry: TrainerCarry


def _entropy(seed: SeedLike, *extra: int) -> tuple[int, ...]:
    parts = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    try:
        parts = tuple(int(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"seeds must be integers, got {parts!r}") from exc
    if any(p < 0 for p in parts):
        raise InvalidSpec(f"seeds must be nonnegative, got {parts}")
    return parts + tuple(int(e) for e in extra)


def derive_seed(seed: SeedLike, *extra: int) -> tuple[int, ...]:
    """Compose a seed with extra stream labels (e.g. a round index)."""
    return _entropy(seed, *extra)


def init_model(spec: ModelSpec) -> TensorMap:
    """Deterministic per-seed initialization; weights ~ N(0, 1/fan_in), biases zero."""
    rng = np.random.default_rng(_entropy(spec.seed))
    dims = (spec.input_dim, *spec.hidden_dims, 1)
    entries = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = (rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)).astype(np.float32)
        entries.append((f"w{i}", (d_in, d_out), w.reshape(-1)))
        entries.append((f"b{i}", (d_out,), np.zeros(d_out, dtype=np.float32)))
    return TensorMap(entries)


def _layer_count(weights: TensorMap) -> int:
    count = len(weights) // 2
    expected = [f"{kind}{i}" for i in range(count) for kind in ("w", "b")]
    if list(weights.names) != expected:
        raise StructureMismatch(f"not a layered model: entries {weights.names}")
    return count


def _params64(weights: TensorMap) -> dict[str, np.ndarray]:
    return {name: weights.array(name).astype(np.float64) for name in weights.names}


def _to_tensor_map(params: dict[str, np.ndarray], reference: TensorMap) -> TensorMap:
    return TensorMap(
        (name, shape, params[name].reshape(-1).astype(np.float32))
        for name, shape, _ in reference.entries()
    )


def _forward_batch(params: dict[str, np.ndarray], layers: int, x: np.ndarray):
    """Logits and per-layer activations for a float64 batch."""
    activations = [x]
    h = x
    for i in range(layers):
        z = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < layers - 1:
            h = np.tanh(z)
            activations.append(h)
        else:
            return z[:, 0], activations
    raise AssertionError("unreachable")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce(logits: np.ndarray, y: np.ndarray) -> float:
    # mean of softplus(z) - y*z, computed stably
    return float(np.mean(np.maximum(logits, 0.0) - y * logits + np.log1p(np.exp(-np.abs(logits)))))


def _check_features(weights: TensorMap, x: np.ndarray) -> None:
    input_dim = weights.shape("w0")[0]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise DimensionMismatch(f"model expects {input_dim} features, got {x.shape}")


def predict_proba(weights: TensorMap, features: np.ndarray) -> np.ndarray:
    """Positive-class probability for each row of a feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    _check_features(weights, x)
    layers = _layer_count(weights)
    logits, _ = _forward_batch(_params64(weights), layers, x)
    return _sigmoid(logits)


def forward(weights: TensorMap, features: Sequence[float]) -> float:
    """Probability for a single feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected a single feature vector, got shape {x.shape}")
    return float(predict_proba(weights, x)[0])


def loss_and_gradient(
    weights: TensorMap, features: np.ndarray, labels: Sequence[int]
) -> tuple[float, TensorMap]:
    """Mean binary cross-entropy and its exact gradient over a batch."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape[0] == 0:
        raise EmptyBatch("empty batch")
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"{x.shape[0]} rows vs {y.shape[0]} labels")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    _check_features(weights, x)
    params = _params64(weights)
    layers = _layer_count(weights)
    loss, grads = _loss_and_grad64(params, layers, x, y)
    return loss, _to_tensor_map(grads, weights)


def _loss_and_grad64(params, layers, x, y):
    logits, activations = _forward_batch(params, layers, x)
    loss = _bce(logits, y)
    batch = x.shape[0]
    # d(loss)/d(logit) for mean reduction
    delta = ((_sigmoid(logits) - y) / batch)[:, None]
    grads: dict[str, np.ndarray] = {}
    for i in range(layers - 1, -1, -1):
        h = activations[i]
        grads[f"w{i}"] = h.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            # tanh'(z) = 1 - tanh(z)^2, and activations[i] stores tanh(z)
            delta = (delta @ params[f"w{i}"].T) * (1.0 - activations[i] ** 2)
    return loss, grads


def adam_step(
    state: OptimizerState, weights: TensorMap, grad: TensorMap
) -> tuple[OptimizerState, TensorMap]:
    """One bias-corrected Adam update; returns the new state and weights."""
    if weights.structure() != grad.structure():
        raise StructureMismatch("weights and gradient structures differ")
    if state.first_moment:
        for name in weights.names:
            moment = state.first_moment.get(name)
            if moment is None or moment.size != weights.array(name).size:
                raise StructureMismatch(f"optimizer moments do not match weights at {name!r}")
    t = state.step + 1
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    new_entries = []
    for name, shape, flat in weights.entries():
        g = grad.array(name).reshape(-1).astype(np.float64)
        m = state.first_moment.get(name, np.zeros(g.size))
        v = state.second_moment.get(name, np.zeros(g.size))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        update = state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new_m[name] = m
        new_v[name] = v
        new_entries.append((name, shape, (flat.astype(np.float64) - update).astype(np.float32)))
    new_state = replace(state, step=t, first_moment=new_m, second_moment=new_v)
    return new_state, TensorMap(new_entries)


def fresh_optimizer(weights: TensorMap, learning_rate: float) -> OptimizerState:
    zeros = {name: np.zeros(weights.array(name).size) for name in weights.names}
    return OptimizerState(
        step=0,
        first_moment=zeros,
        second_moment={k: v.copy() for k, v in zeros.items()},
        learning_rate=learning_rate,
    )


def scheduler_observe(
    s: PlateauScheduler, val_loss: float, lr: float
) -> tuple[PlateauScheduler, float]:
    """Feed one validation loss; returns the updated scheduler and learning rate.

    The rate is multiplied by `factor` exactly when `patience` consecutive
    observations fail to strictly improve the best loss; the counter resets
    both on strict improvement and on each reduction.
    """
    if not math.isfinite(val_loss):
        raise NonFiniteLoss(f"validation loss is {val_loss!r}")
    if val_loss < s.best_loss:
        return replace(s, best_loss=val_loss, evals_since_improvement=0), lr
    stalled = s.evals_since_improvement + 1
    if stalled >= s.patience:
        return replace(s, evals_since_improvement=0), max(lr * s.factor, s.min_lr)
    return replace(s, evals_since_improvement=stalled), lr


def train_local(
    weights: TensorMap,
    data: "SiteDataset",
    epochs: int,
    rng_seed: SeedLike,
    config: Optional[TrainerConfig] = None,
    carry: Optional[TrainerCarry] = None,
) -> TrainReport:
    """Run full epochs over the train split, validating once per epoch.

    Shuffling is seeded per global epoch index, so chaining two calls via
    `carry` is bit-identical to one longer call with the same seed.
    """
    config = config or TrainerConfig()
    if epochs < 1:
        raise InvalidSpec(f"epochs must be >= 1, got {epochs}")
    train_idx = np.asarray(data.train_idx)
    val_idx = np.asarray(data.val_idx)
    if train_idx.size == 0 or val_idx.size == 0:
        raise EmptySplit(
            f"site {data.site_id!r}: train={train_idx.size} val={val_idx.size}"
        )
    x_all = np.asarray(data.features, dtype=np.float64)
    _check_features(weights, x_all)
    y_all = np.asarray(data.labels, dtype=np.float64)
    x_train, y_train = x_all[train_idx], y_all[train_idx]
    x_val, y_val = x_all[val_idx], y_all[val_idx]

    layers = _layer_count(weights)
    params = _params64(weights)
    if carry is None:
        opt = fresh_optimizer(weights, config.learning_rate)
        sched = PlateauScheduler(
            factor=config.plateau_factor, patience=config.plateau_patience, min_lr=config.min_lr
        )
        epoch_offset = 0
    else:
        opt, sched, epoch_offset = carry.optimizer, carry.scheduler, carry.epochs_done

    base = _entropy(rng_seed)
    n = train_idx.size
    val_loss = math.nan
    for e in range(epochs):
        order = np.random.default_rng(base + (epoch_offset + e,)).permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            _, grads = _loss_and_grad64(params, layers, x_train[batch], y_train[batch])
            opt, params = _adam_step64(opt, params, grads)
        val_logits, _ = _forward_batch(params, layers, x_val)
        val_loss = _bce(val_logits, y_val)
        sched, new_lr = scheduler_observe(sched, val_loss, opt.learning_rate)
        if new_lr != opt.learning_rate:
            opt = replace(opt, learning_rate=new_lr)

    train_logits, _ = _forward_batch(params, layers, x_train)
    final_weights = _to_tensor_map(params, weights)
    return TrainReport(
        epochs_run=epochs,
        final_train_loss=_bce(train_logits, y_train),
        final_val_loss=val_loss,
        sample_count=int(train_idx.size),
        weights=final_weights,
        carry=TrainerCarry(opt, sched, epoch_offset + epochs),
    )


def _adam_step64(state: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Adam step over float64 params, rounding each through float32 storage."""
    t = state.step + 1
    corr1 = 1.0 - state.beta1**t
    corr2 = 1.0 - state.beta2**t
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    new_params: dict[str, np.ndarray] = {}
    for name, w in params.items():
        g = grads[name].reshape(w.shape)
        m = state.beta1 * state.first_moment[name].reshape(w.shape) + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name].reshape(w.shape) + (1.0 - state.beta2) * g * g
        update = state.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        new_m[name] = m.reshape(-1)
        new_v[name] = v.reshape(-1)
        # params live in float32 between steps; float64 is only the compute dtype
        new_params[name] = (w - update).astype(np.float32).astype(np.float64)
    return replace(state, step=t, first_moment=new_m, second_moment=new_v), new_params
