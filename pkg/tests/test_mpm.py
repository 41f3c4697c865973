import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hoiassist import dataset as ds
from hoiassist.mpm import checkpoint
from hoiassist.mpm.gate import NO_OUTPUT, StabilityGate, gate_decision
from hoiassist.mpm.network import (MpmNetwork, ShapeError, batch_loss, classify, cross_entropy,
                                   loss_and_gradient, one_hot)
from hoiassist.mpm.training import TrainingConfig, accuracy, confusion_matrix, train_mpm

LN4 = math.log(4.0)


def small_net(seed=0, inputs=5, hidden=4, layers=2, classes=3):
    return MpmNetwork.initialize(seed, inputs, hidden, layers, classes)


# --- classify -----------------------------------------------------------------------

def test_zero_network_is_uniform():
    net = MpmNetwork()
    p = classify(net, np.random.default_rng(0).normal(size=(10, 63)))
    np.testing.assert_allclose(p, 0.25, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_classify_is_a_distribution(seed, scale):
    net = MpmNetwork.initialize(seed, 63, 6, 2, 4)
    x = np.random.default_rng(seed).normal(size=(10, 63)) * scale
    p = classify(net, x)
    assert abs(p.sum() - 1.0) < 1e-9 and np.all(p >= 0) and np.all(p <= 1)
    assert np.array_equal(p, classify(net, x))


def test_classify_shape_error():
    with pytest.raises(ShapeError):
        classify(MpmNetwork(), np.zeros((9, 63)))
    with pytest.raises(ShapeError):
        classify(MpmNetwork(), np.zeros((10, 62)))


def test_default_architecture():
    net = MpmNetwork.initialize(0)
    assert (net.hidden_size, net.num_layers, net.num_classes, net.input_size) == (64, 2, 4, 63)
    assert net.params["l1.fwd.W_ih"].shape == (256, 128)
    assert net.params["head.W"].shape == (4, 128)


def test_initialization_bounds():
    net = MpmNetwork.initialize(3, hidden_size=16, forget_bias=1.0)
    w = net.params["l0.fwd.W_ih"]
    assert np.abs(w).max() <= 1 / math.sqrt(63)
    assert np.all(net.params["l0.bwd.b"][16:32] == 1.0)


def test_mirror_symmetry():
    """Swapping the two directions and reversing time gives the same output."""
    net = small_net(seed=4, layers=2)
    x = np.random.default_rng(4).normal(size=(3, 7, 5))
    np.testing.assert_allclose(net.mirrored().logits(x[:, ::-1]), net.logits(x), rtol=0, atol=1e-12)


# --- loss -----------------------------------------------------------------------------

def test_loss_examples():
    assert cross_entropy([1.0, 0.0, 0.0, 0.0], [1, 0, 0, 0]) == 0.0
    assert cross_entropy([0.25] * 4, [0, 0, 1, 0]) == pytest.approx(1.386294, abs=1e-6)
    assert cross_entropy([[0.25] * 4] * 2, [[1, 0, 0, 0], [0, 0, 0, 1]]) == pytest.approx(2.772589, abs=1e-6)


def test_loss_floor_and_errors():
    assert cross_entropy([0.0, 1.0], [1, 0]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        cross_entropy([0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ValueError):
        cross_entropy([[0.5, 0.5]], [[1, 0, 0]])


@given(st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_uniform_loss_additive(labels):
    assert cross_entropy(np.full((len(labels), 4), 0.25), one_hot(labels, 4)) == pytest.approx(len(labels) * LN4)


# --- gradient ---------------------------------------------------------------------------

def test_zero_network_head_gradient_closed_form():
    net = MpmNetwork(63, 8, 2, 4)
    x = np.random.default_rng(1).normal(size=(6, 10, 63))
    labels = np.array([0, 0, 0, 1, 2, 2])
    loss, g = loss_and_gradient(net, x, labels)
    assert loss == pytest.approx(LN4)
    # softmax-CE at uniform output: dL/db = 1/K - class frequency
    np.testing.assert_allclose(g["head.b"], 0.25 - np.bincount(labels, minlength=4) / 6, atol=1e-15)
    # zero weights keep every hidden state at zero, so nothing else moves
    assert all(not np.any(v) for k, v in g.items() if k != "head.b")


def test_zero_network_balanced_batch():
    _, g = loss_and_gradient(MpmNetwork(63, 8, 1, 4), np.ones((8, 10, 63)), np.arange(8) % 4)
    np.testing.assert_allclose(g["head.b"], 0.0, atol=1e-15)


def test_duplicated_batch_gradient_matches_single():
    net = small_net(seed=2)
    x = np.random.default_rng(2).normal(size=(1, 6, 5))
    _, one = loss_and_gradient(net, x, [1])
    _, dup = loss_and_gradient(net, np.repeat(x, 4, axis=0), [1] * 4)
    for k in one:
        np.testing.assert_allclose(dup[k], one[k], rtol=1e-12, atol=1e-15)


def test_gradient_includes_input_normalization():
    """Finite-difference spot check with non-trivial stored normalization."""
    rng = np.random.default_rng(9)
    net = small_net(seed=9, inputs=4, hidden=3, layers=2, classes=2)
    net.input_mean = rng.normal(size=4)
    net.input_scale = rng.uniform(0.5, 2.0, 4)
    x, y = rng.normal(size=(2, 5, 4)), np.array([0, 1])
    _, g = loss_and_gradient(net, x, y)
    for name in ("l0.fwd.W_ih", "l1.bwd.W_hh", "head.W"):
        p = net.params[name]
        for idx in list(np.ndindex(p.shape))[:12]:
            old = p[idx]
            p[idx] = old + 1e-5
            up = batch_loss(net, x, y)
            p[idx] = old - 1e-5
            down = batch_loss(net, x, y)
            p[idx] = old
            num = (up - down) / 2e-5
            assert abs(num - g[name][idx]) <= 1e-4 * max(abs(num), abs(g[name][idx]), 1e-6)


def test_gradient_shapes_and_finiteness():
    net = small_net()
    _, g = loss_and_gradient(net, np.random.default_rng(0).normal(size=(4, 10, 5)), [0, 1, 2, 0])
    assert list(g) == list(net.params)
    assert all(g[k].shape == net.params[k].shape and np.all(np.isfinite(g[k])) for k in g)
    with pytest.raises(ValueError):
        loss_and_gradient(net, np.zeros((0, 10, 5)), [])


# --- training ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_split():
    data = ds.build_dataset(ds.generate_default_trajectories(seed=5, frames=300), samples_per_class=20)
    return ds.stratified_split(data, 0.8, seed=1)


def test_zero_learning_rate_changes_nothing(tiny_split):
    train, val = tiny_split
    cfg = TrainingConfig(epochs=3, learning_rate=0.0, hidden_size=8, batch_size=16)
    net0 = MpmNetwork.initialize(cfg.seed, 63, 8, 2, 4)
    net, trace = train_mpm(train, val, cfg)
    assert all(np.array_equal(net.params[k], net0.params[k]) for k in net0.params)
    assert len(set(trace.train_loss)) == 1


def test_training_is_deterministic(tiny_split):
    train, val = tiny_split
    cfg = TrainingConfig(epochs=2, hidden_size=8, batch_size=16, seed=4)
    a, ta = train_mpm(train, val, cfg)
    b, tb = train_mpm(train, val, cfg)
    assert checkpoint.to_bytes(a) == checkpoint.to_bytes(b)
    assert ta.train_loss == tb.train_loss


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_training_reduces_loss(tiny_split, optimizer):
    train, val = tiny_split
    lr = 1e-2 if optimizer == "adam" else 0.5
    _, trace = train_mpm(train, val, TrainingConfig(epochs=15, learning_rate=lr, hidden_size=8, batch_size=16,
                                                    optimizer=optimizer))
    assert trace.train_loss[-1] < 0.7 * trace.train_loss[0]
    assert len(trace.val_accuracy) == 15


def test_training_errors(tiny_split):
    empty = tiny_split[0].subset([])
    with pytest.raises(ValueError):
        train_mpm(empty)
    for bad in (dict(epochs=0), dict(batch_size=0), dict(learning_rate=-1e-3), dict(optimizer="rmsprop"),
                dict(learning_rate=float("nan"))):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)


def test_default_training_config():
    cfg = TrainingConfig()
    assert (cfg.epochs, cfg.learning_rate, cfg.batch_size, cfg.optimizer) == (100, 2.5e-4, 512, "adam")


def test_trained_network_recognizes_held_out_come(trained):
    val = trained.validation
    come = val.windows[val.labels == ds.MotionClass.COME]
    assert len(come) == 50
    assert all(int(np.argmax(classify(trained.network, w))) == ds.MotionClass.COME for w in come)


def test_confusion_rows_sum_to_counts(trained):
    cm = confusion_matrix(trained.network, trained.validation)
    assert cm.sum(axis=1).tolist() == [50, 50, 50, 50]
    assert accuracy(trained.network, trained.validation) == pytest.approx(np.trace(cm) / 200)


# --- gate -----------------------------------------------------------------------------------

def test_gate_examples():
    g = StabilityGate()
    assert g.capacity == 10
    outs = [gate_decision(g, 1) for _ in range(10)]
    assert outs[:9] == [NO_OUTPUT] * 9 and outs[9] == 1

    g = StabilityGate(10)
    for _ in range(9):
        gate_decision(g, 1)
    assert gate_decision(g, 2) is NO_OUTPUT

    g = StabilityGate(10)
    assert [gate_decision(g, 3) for _ in range(3)] == [NO_OUTPUT] * 3


def test_gate_invalid_code():
    with pytest.raises(ValueError):
        StabilityGate(4, 3).push(3)
    with pytest.raises(ValueError):
        StabilityGate(0)


@given(st.lists(st.integers(0, 3), max_size=40), st.integers(1, 12))
def test_gate_queue_bounded(seq, n):
    g = StabilityGate(n, 4)
    for d in seq:
        out = g.push(d)
        assert len(g) <= n
        assert out is NO_OUTPUT or (len(g) == n and set(g.entries) == {out})


def test_gate_reset_requires_refill():
    g = StabilityGate(4)
    assert [g.push(0) for _ in range(4)][-1] == 0
    g.reset()
    assert [g.push(0) for _ in range(4)] == [None, None, None, 0]


# --- checkpoint -------------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    net = small_net(seed=11, inputs=63, classes=4)
    net.input_mean = np.linspace(-1, 1, 63)
    net.input_scale = np.linspace(0.5, 2, 63)
    path = tmp_path / "net.bin"
    checkpoint.save(net, path, ("Keep", "Come", "Back", "Ring"))
    back, names = checkpoint.load(path)
    assert names == ("Keep", "Come", "Back", "Ring")
    assert checkpoint.to_bytes(back) == path.read_bytes()
    x = np.random.default_rng(0).normal(size=(2, 10, 63))
    assert np.array_equal(back.logits(x), net.logits(x))


def test_checkpoint_corruption():
    raw = checkpoint.to_bytes(small_net(inputs=63, classes=4))
    for bad in (b"XXXX" + raw[4:], raw[:-8], raw + b"\0", raw[:30]):
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.from_bytes(bad)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.to_bytes(small_net(classes=3), ("a", "b"))
