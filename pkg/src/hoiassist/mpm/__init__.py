from .network import MpmNetwork, classify, cross_entropy, loss_and_gradient, softmax
from .gate import NO_OUTPUT, StabilityGate, gate_decision
from .training import TrainingConfig, TrainingTrace, train_mpm, accuracy, confusion_matrix

loss = cross_entropy
gradient = loss_and_gradient

__all__ = [
    "MpmNetwork", "classify", "cross_entropy", "loss", "gradient", "loss_and_gradient", "softmax",
    "NO_OUTPUT", "StabilityGate", "gate_decision",
    "TrainingConfig", "TrainingTrace", "train_mpm", "accuracy", "confusion_matrix",
]
