"""Mini-batch training for the window classifier."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..dataset import LabeledDataset
from .network import MpmNetwork, cross_entropy, loss_and_gradient, one_hot

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    learning_rate: float = 2.5e-4
    batch_size: int = 512
    seed: int = 0
    optimizer: str = "adam"
    hidden_size: int = 64
    num_layers: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass
class TrainingTrace:
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)

    @property
    def final_val_accuracy(self) -> float:
        return self.val_accuracy[-1] if self.val_accuracy else float("nan")


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class GradientDescent:
    def __init__(self, params: dict, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            params[k] -= self.lr * g


def fit_normalization(windows: np.ndarray, floor_fraction: float = 0.1):
    """Per-feature mean and standard deviation of the training windows.

    Each std is floored at ``floor_fraction`` of the median feature std so
    near-constant coordinates are not blown up.
    """
    flat = windows.reshape(-1, windows.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    floor = floor_fraction * float(np.median(std)) if np.median(std) > 0 else 1.0
    return mean, np.maximum(std, floor)


def accuracy(net: MpmNetwork, data: LabeledDataset) -> float:
    if len(data) == 0:
        return float("nan")
    return float(np.mean(net.predict(data.windows) == data.labels))


def train_mpm(train: LabeledDataset, validation: LabeledDataset | None = None,
              config: TrainingConfig = TrainingConfig(),
              network: MpmNetwork | None = None) -> tuple[MpmNetwork, TrainingTrace]:
    """Train from a seeded initialization; returns the network and per-epoch trace.

    The trace records, after each epoch, the mean training loss over the full
    training set and the validation accuracy.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if network is None:
        network = MpmNetwork.initialize(config.seed, train.windows.shape[-1], config.hidden_size,
                                        config.num_layers, train.num_classes)
        network.input_mean, network.input_scale = fit_normalization(train.windows)
    else:
        network = network.copy()
    if config.optimizer == "adam":
        opt = Adam(network.params, config.learning_rate, config.beta1, config.beta2, config.eps)
    else:
        opt = GradientDescent(network.params, config.learning_rate)

    rng = np.random.default_rng([config.seed, 1])
    trace = TrainingTrace()
    n = len(train)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = loss_and_gradient(network, train.windows[idx], train.labels[idx])
            opt.step(network.params, grads)
        probs = network.predict_proba(train.windows)
        trace.train_loss.append(cross_entropy(probs, one_hot(train.labels, network.num_classes)) / n)
        trace.train_accuracy.append(float(np.mean(np.argmax(probs, axis=1) == train.labels)))
        if validation is not None and len(validation):
            trace.val_accuracy.append(accuracy(network, validation))
        log.debug("epoch %d loss %.4f val %.3f", epoch + 1, trace.train_loss[-1],
                  trace.val_accuracy[-1] if trace.val_accuracy else float("nan"))
    network.validate()
    return network, trace


def confusion_matrix(net: MpmNetwork, data: LabeledDataset) -> np.ndarray:
    k = data.num_classes
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (data.labels, net.predict(data.windows)), 1)
    return out
