"""Bidirectional LSTM window classifier, written directly against numpy.

Parameters live in a flat, ordered dict so checkpointing, optimizers and
gradient checks can walk them uniformly. Per layer ``l`` and direction
``d`` in (fwd, bwd)::

    l{l}.{d}.W_ih   (4H, in)    gate rows ordered input, forget, cell, output
    l{l}.{d}.W_hh   (4H, H)
    l{l}.{d}.b      (4H,)
    head.W          (K, 2H)     columns: [last forward state | first backward state]
    head.b          (K,)

Layer ``l > 0`` consumes ``[forward outputs | backward outputs]`` (in = 2H).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..posekit import FeatureWindow, NUM_FEATURES, WINDOW_LENGTH

DIRECTIONS = ("fwd", "bwd")
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


def param_names(num_layers: int) -> list[str]:
    names = []
    for layer in range(num_layers):
        for d in DIRECTIONS:
            names += [f"l{layer}.{d}.W_ih", f"l{layer}.{d}.W_hh", f"l{layer}.{d}.b"]
    return names + ["head.W", "head.b"]


@dataclass
class MpmNetwork:
    input_size: int = NUM_FEATURES
    hidden_size: int = 64
    num_layers: int = 2
    num_classes: int = 4
    params: dict = field(default_factory=dict)
    input_mean: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        if not self.params:
            self.params = {name: np.zeros(shape) for name, shape in self.shapes().items()}
        if self.input_mean is None:
            self.input_mean = np.zeros(self.input_size)
        if self.input_scale is None:
            self.input_scale = np.ones(self.input_size)
        self.validate()

    # -- bookkeeping ---------------------------------------------------------

    def shapes(self) -> dict[str, tuple]:
        H, out = self.hidden_size, {}
        for layer in range(self.num_layers):
            fan_in = self.input_size if layer == 0 else 2 * H
            for d in DIRECTIONS:
                out[f"l{layer}.{d}.W_ih"] = (4 * H, fan_in)
                out[f"l{layer}.{d}.W_hh"] = (4 * H, H)
                out[f"l{layer}.{d}.b"] = (4 * H,)
        out["head.W"] = (self.num_classes, 2 * H)
        out["head.b"] = (self.num_classes,)
        return out

    def validate(self) -> None:
        shapes = self.shapes()
        if list(self.params) != list(shapes):
            raise ShapeError(f"parameter names/order mismatch: {list(self.params)[:3]}...")
        for name, shape in shapes.items():
            arr = self.params[name]
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if self.input_mean.shape != (self.input_size,) or self.input_scale.shape != (self.input_size,):
            raise ShapeError("input normalization must match input_size")
        if np.any(self.input_scale <= 0):
            raise ValueError("input_scale must be positive")

    @classmethod
    def initialize(cls, seed: int = 0, input_size: int = NUM_FEATURES, hidden_size: int = 64,
                   num_layers: int = 2, num_classes: int = 4, forget_bias: float = 1.0) -> "MpmNetwork":
        """Uniform(+-1/sqrt(fan_in)) weights, forget-gate bias set to ``forget_bias``."""
        net = cls(input_size, hidden_size, num_layers, num_classes)
        rng = np.random.default_rng(seed)
        H = hidden_size
        for name, shape in net.shapes().items():
            if name.endswith("W_ih") or name == "head.W":
                fan_in = shape[1]
            else:
                fan_in = H if not name.startswith("head") else 2 * H
            bound = 1.0 / np.sqrt(fan_in)
            net.params[name] = rng.uniform(-bound, bound, shape)
            if name.endswith(".b") and not name.startswith("head"):
                net.params[name][H:2 * H] = forget_bias
        return net

    def copy(self) -> "MpmNetwork":
        return MpmNetwork(self.input_size, self.hidden_size, self.num_layers, self.num_classes,
                          {k: v.copy() for k, v in self.params.items()},
                          self.input_mean.copy(), self.input_scale.copy())

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def mirrored(self) -> "MpmNetwork":
        """Swap forward/backward roles so ``mirrored(x[::-1])`` equals ``self(x)``."""
        H = self.hidden_size
        net = self.copy()
        swap_cols = np.r_[H:2 * H, 0:H]
        for layer in range(self.num_layers):
            for part in ("W_ih", "W_hh", "b"):
                a, b = f"l{layer}.fwd.{part}", f"l{layer}.bwd.{part}"
                net.params[a], net.params[b] = self.params[b].copy(), self.params[a].copy()
            if layer > 0:
                for d in DIRECTIONS:
                    net.params[f"l{layer}.{d}.W_ih"] = net.params[f"l{layer}.{d}.W_ih"][:, swap_cols]
        net.params["head.W"] = self.params["head.W"][:, swap_cols].copy()
        return net

    # -- inference -------------------------------------------------------------

    def _prepare(self, x) -> np.ndarray:
        if isinstance(x, FeatureWindow):
            x = x.frames
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ShapeError(f"expected (batch, T, {self.input_size}) input, got {x.shape}")
        if x.shape[1] < 1:
            raise ShapeError("sequence must have at least one step")
        return (x - self.input_mean) / self.input_scale

    def logits(self, x) -> np.ndarray:
        return _forward(self, self._prepare(x))[0]

    def predict_proba(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def classify(network: MpmNetwork, window) -> np.ndarray:
    """Probability distribution over classes for one (10, 63) window."""
    frames = window.frames if isinstance(window, FeatureWindow) else np.asarray(window, float)
    if frames.shape != (WINDOW_LENGTH, network.input_size):
        raise ShapeError(f"window must be ({WINDOW_LENGTH}, {network.input_size}), got {frames.shape}")
    return network.predict_proba(frames)[0]


# -- forward / backward through time ---------------------------------------------

def _gate_scale(H):
    # sigmoid(x) = (1 + tanh(x / 2)) / 2 lets one tanh call cover all four gates
    s = np.full(4 * H, 0.5)
    s[2 * H:3 * H] = 1.0
    return s


def _direction_forward(x, W_ih, W_hh, b, reverse):
    B, T, _ = x.shape
    H = W_hh.shape[1]
    scale = _gate_scale(H)
    xp = (x @ W_ih.T + b) * scale
    W_hh_t = W_hh.T * scale
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.empty((B, T, H))
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        act = xp[:, t] + h @ W_hh_t
        np.tanh(act, out=act)
        for gate in (act[:, :2 * H], act[:, 3 * H:]):
            gate += 1.0
            gate *= 0.5
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        out[:, t] = h
        steps.append((t, act, c_prev, tc, h_prev))
    return out, steps


def _direction_backward(x, dout, W_ih, W_hh, steps):
    B, T, D = x.shape
    H = W_hh.shape[1]
    dxp = np.zeros((B, T, 4 * H))
    dW_hh = np.zeros_like(W_hh)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t, act, c_prev, tc, h_prev in reversed(steps):
        i, f, g, o = act[:, :H], act[:, H:2 * H], act[:, 2 * H:3 * H], act[:, 3 * H:]
        dh = dout[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        # d(activation) for each gate block, then through the nonlinearity
        dact = np.concatenate([dc * g, dc * c_prev, dc * i, dh * tc], axis=1)
        deriv = act * (1.0 - act)
        deriv[:, 2 * H:3 * H] = 1.0 - g * g
        dz = dact * deriv
        dxp[:, t] = dz
        dW_hh += dz.T @ h_prev
        dh_next = dz @ W_hh
        dc_next = dc * f
    flat = dxp.reshape(B * T, 4 * H)
    dW_ih = flat.T @ x.reshape(B * T, D)
    db = flat.sum(axis=0)
    dx = dxp @ W_ih
    return dx, dW_ih, dW_hh, db


def _forward(net: MpmNetwork, x: np.ndarray):
    p = net.params
    caches = []
    layer_in = x
    for layer in range(net.num_layers):
        outs = []
        for d in DIRECTIONS:
            key = f"l{layer}.{d}."
            out, steps = _direction_forward(layer_in, p[key + "W_ih"], p[key + "W_hh"], p[key + "b"], d == "bwd")
            outs.append(out)
            caches.append((layer, d, layer_in, steps))
        layer_in = np.concatenate(outs, axis=2)
    H = net.hidden_size
    features = np.concatenate([layer_in[:, -1, :H], layer_in[:, 0, H:]], axis=1)
    logits = features @ p["head.W"].T + p["head.b"]
    return logits, (caches, layer_in, features)


def cross_entropy(predictions, labels) -> float:
    """Summed cross-entropy over steps: -sum_t sum_k label[t,k] * log(pred[t,k]).

    ``labels`` must be one-hot rows; log is floored at 1e-12.
    """
    pred = np.atleast_2d(np.asarray(predictions, float))
    lab = np.atleast_2d(np.asarray(labels, float))
    if pred.shape != lab.shape:
        raise ShapeError(f"predictions {pred.shape} and labels {lab.shape} differ")
    if not (np.all((lab == 0) | (lab == 1)) and np.all(lab.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    return float(-np.sum(lab * np.log(np.maximum(pred, LOG_FLOOR))))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def batch_loss(net: MpmNetwork, x, labels) -> float:
    """Mean per-window cross-entropy of a batch."""
    probs = net.predict_proba(x)
    return cross_entropy(probs, one_hot(labels, net.num_classes)) / len(probs)


def loss_and_gradient(net: MpmNetwork, x, labels) -> tuple[float, dict]:
    """Batch-mean cross-entropy and its gradient for every parameter."""
    xn = net._prepare(x)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0 or len(labels) != len(xn):
        raise ValueError("batch must be nonempty with one label per window")
    B, H = len(xn), net.hidden_size
    logits, (caches, top, features) = _forward(net, xn)
    probs = softmax(logits)
    target = one_hot(labels, net.num_classes)
    loss = cross_entropy(probs, target) / B

    p = net.params
    grads = {}
    dlogits = (probs - target) / B
    grads["head.W"] = dlogits.T @ features
    grads["head.b"] = dlogits.sum(axis=0)
    dfeat = dlogits @ p["head.W"]
    dlayer = np.zeros_like(top)
    dlayer[:, -1, :H] = dfeat[:, :H]
    dlayer[:, 0, H:] = dfeat[:, H:]

    for layer in range(net.num_layers - 1, -1, -1):
        dinput = None
        for layer_c, d, layer_in, steps in caches[2 * layer:2 * layer + 2]:
            key = f"l{layer}.{d}."
            dout = dlayer[:, :, :H] if d == "fwd" else dlayer[:, :, H:]
            dx, dW_ih, dW_hh, db = _direction_backward(layer_in, dout, p[key + "W_ih"], p[key + "W_hh"], steps)
            grads[key + "W_ih"], grads[key + "W_hh"], grads[key + "b"] = dW_ih, dW_hh, db
            dinput = dx if dinput is None else dinput + dx
        dlayer = dinput
    return loss, {name: grads[name] for name in p}
