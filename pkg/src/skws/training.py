"""Surrogate-gradient BPTT training loop, loss, optimizers and metrics.

Backpropagation runs through the full time-unrolled graph (no truncation;
T is small). A fixed seed makes the whole trajectory reproducible: shuffle
order, batch composition and parameter updates are all deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ContractError, NumericError, StateError
from .model import Model, ModelConfig
from .tensor import Tensor, active_tape, backward, no_grad, record_op


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"          # adam | sgd-momentum
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    seed: int = 0
    checkpoint_every: int = 0        # epochs; 0 disables periodic checkpoints
    early_stop_patience: int = 0     # 0 disables early stopping

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be nonnegative, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Metrics:
    loss: float
    accuracy: float
    confusion: np.ndarray
    count: int

    def line(self, epoch: int, split: str) -> str:
        return f"epoch={epoch} split={split} loss={self.loss:.6f} accuracy={self.accuracy:.6f}"


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Stabilized by per-row max subtraction; log-sum-exp is accumulated in
    float64 regardless of storage dtype.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ContractError(
            f"labels shape {labels.shape} does not match logits {logits.shape}")
    n, classes = logits.shape
    if labels.min() < 0 or labels.max() >= classes:
        raise ContractError(
            f"labels must lie in [0, {classes}), got range "
            f"[{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    exp = np.exp(z)
    denom = exp.sum(axis=1, keepdims=True)
    softmax = exp / denom
    logp = z - np.log(denom)
    loss = -logp[np.arange(n), labels].mean()

    onehot = np.zeros_like(softmax)
    onehot[np.arange(n), labels] = 1.0

    def bwd(g):
        return (float(g.reshape(())) * (softmax - onehot) / n,)

    return record_op(np.asarray(loss, dtype=logits.dtype), (logits,), bwd,
                     "cross_entropy")


class SgdMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict = {}

    def step(self, params: dict) -> None:
        for name, p in params.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            elif v.shape != p.data.shape:
                raise StateError(
                    f"parameter {name!r} changed shape: state {v.shape}, "
                    f"tensor {p.data.shape}")
            v = self.momentum * v + p.grad
            p.data = p.data - self.lr * v
            self.velocity[name] = v


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self.v[name]
                if m.shape != p.data.shape:
                    raise StateError(
                        f"parameter {name!r} changed shape: state {m.shape}, "
                        f"tensor {p.data.shape}")
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            m_hat = m / correction1
            v_hat = v / correction2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            self.m[name] = m
            self.v[name] = v


def make_optimizer(cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return SgdMomentum(cfg.learning_rate, cfg.momentum)


def optimizer_step(params: dict, optimizer) -> None:
    """Apply one update from the accumulated gradients, then clear them."""
    optimizer.step(params)
    for p in params.values():
        p.zero_grad()


def _batch_indices(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(model: Model, dataset, cfg: TrainConfig, optimizer=None,
                rng: Optional[np.random.Generator] = None) -> Metrics:
    """One seeded-shuffle pass: forward, loss, BPTT backward, update."""
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if optimizer is None:
        optimizer = make_optimizer(cfg)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    classes = model.cfg.num_classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    loss_sum = 0.0
    correct = 0
    total = 0
    for indices in _batch_indices(len(dataset), cfg.batch_size, rng):
        waves, labels = dataset.batch(indices)
        out = model.forward(waves, train=True)
        loss = cross_entropy(out.logits, labels)
        if not loss.is_finite():
            culprit = active_tape().first_nonfinite()
            where = culprit[0] if culprit else "loss"
            raise NumericError(f"non-finite values first appeared in {where!r}")
        backward(loss)
        optimizer_step(model.params, optimizer)

        predicted = out.logits.data.argmax(axis=1)
        loss_sum += loss.item() * len(labels)
        correct += int((predicted == labels).sum())
        total += len(labels)
        for truth, pred in zip(labels, predicted):
            confusion[truth, pred] += 1
    return Metrics(loss=loss_sum / total, accuracy=correct / total,
                   confusion=confusion, count=total)


def evaluate(model: Model, dataset, batch_size: int = 64) -> Metrics:
    """Eval-mode metrics; mutates neither parameters nor running statistics."""
    classes = model.cfg.num_classes
    confusion = np.zeros((classes, classes), dtype=np.int64)
    loss_sum = 0.0
    correct = 0
    total = 0
    with no_grad():
        for indices in _batch_indices(len(dataset), batch_size, None):
            waves, labels = dataset.batch(indices)
            out = model.forward(waves, train=False)
            loss = cross_entropy(out.logits, labels)
            predicted = out.logits.data.argmax(axis=1)
            loss_sum += loss.item() * len(labels)
            correct += int((predicted == labels).sum())
            total += len(labels)
            for truth, pred in zip(labels, predicted):
                confusion[truth, pred] += 1
    if total == 0:
        raise ContractError("cannot evaluate an empty dataset")
    return Metrics(loss=loss_sum / total, accuracy=correct / total,
                   confusion=confusion, count=total)


def run_training(model: Model, train_split, val_split, cfg: TrainConfig,
                 checkpoint_path: Optional[str] = None,
                 log_fn: Optional[Callable[[str], None]] = None) -> list:
    """Train for cfg.epochs, keeping the best-validation checkpoint.

    Returns the per-epoch history as a list of (epoch, train Metrics,
    validation Metrics or None) tuples.
    """
    optimizer = make_optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_accuracy = -1.0
    since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        train_metrics = train_epoch(model, train_split, cfg, optimizer, rng)
        if log_fn:
            log_fn(train_metrics.line(epoch, "train"))
        val_metrics = None
        if val_split is not None and len(val_split):
            val_metrics = evaluate(model, val_split, cfg.batch_size)
            if log_fn:
                log_fn(val_metrics.line(epoch, "validation"))
        history.append((epoch, train_metrics, val_metrics))

        monitored = val_metrics.accuracy if val_metrics else train_metrics.accuracy
        if monitored > best_accuracy:
            best_accuracy = monitored
            since_best = 0
            if checkpoint_path:
                model.save(checkpoint_path)
        else:
            since_best += 1
        if (cfg.checkpoint_every and checkpoint_path
                and epoch % cfg.checkpoint_every == 0):
            model.save(f"{checkpoint_path}.epoch{epoch}")
        if cfg.early_stop_patience and since_best >= cfg.early_stop_patience:
            break
    return history


def synthetic_task_config(timesteps: int = 4) -> ModelConfig:
    """Small architecture for the two-class tone sanity task."""
    return ModelConfig(
        num_classes=2,
        timesteps=timesteps,
        conv_channels=(8, 16),
        conv_strides=(4, 4),
        conv_dilations=(1, 4),
        cla_channels=(16,),
        cla_mid_channels=(8,),
    )
