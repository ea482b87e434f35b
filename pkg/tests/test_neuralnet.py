import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import numerical_grad, pairwise_auc, rel_err
from vfedsec import neuralnet as nn


def rng(seed=0):
    return np.random.default_rng(seed)


# dense and relu

def test_dense_identity_and_bias():
    w = np.eye(3)
    x = rng().normal(size=(4, 3))
    assert np.array_equal(nn.dense_forward(w, None, x), x)
    b = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(nn.dense_forward(w, b, np.zeros((2, 3))), np.tile(b, (2, 1)))
    with pytest.raises(nn.ShapeError):
        nn.dense_forward(w, None, np.zeros((2, 4)))


def test_dense_backward_by_hand():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.array([[0.5, -1.0], [2.0, 0.25]])
    dy = np.ones((2, 2))
    dx, dw, db = nn.dense_backward(w, np.zeros(2), x, dy)
    assert dw.tolist() == [[4.0, 4.0], [6.0, 6.0]]
    assert db.tolist() == [2.0, 2.0]
    assert dx.tolist() == [[-0.5, 2.25], [-0.5, 2.25]]
    assert nn.dense_backward(w, None, x, dy)[2] is None


def test_dense_layer_finite_differences():
    layer = nn.Dense(4, 3, bias=True, rng=rng(1))
    x = rng(2).normal(size=(5, 4))
    c = rng(3).normal(size=(5, 3))

    def f():
        return float(np.sum(layer.forward(x) * c))

    f()
    dx = layer.backward(c)
    assert rel_err(dx, numerical_grad(f, x)) < 1e-6
    assert rel_err(layer.grads[0], numerical_grad(f, layer.weight)) < 1e-6
    assert rel_err(layer.grads[1], numerical_grad(f, layer.bias)) < 1e-6


def test_relu():
    assert nn.relu_forward(np.array([-1.0, 0.0, 2.0])).tolist() == [0.0, 0.0, 2.0]
    assert nn.relu_backward(np.array([-1.0]), np.array([5.0])).tolist() == [0.0]
    x = rng(4).normal(size=(6, 5))
    x[np.abs(x) < 1e-2] = 0.5  # keep away from the kink
    c = rng(5).normal(size=x.shape)
    analytic = nn.relu_backward(x, c)
    assert rel_err(analytic, numerical_grad(lambda: float(np.sum(nn.relu_forward(x) * c)), x)) < 1e-4


def test_mlp_structure():
    net = nn.mlp([4, 8, 3], bias=False, rng=rng())
    assert [type(layer).__name__ for layer in net.layers] == ["Dense", "ReLU", "Dense"]
    assert net.out_dim == 3
    assert len(net.params()) == 2


# batchnorm

def test_batchnorm_normalizes():
    bn = nn.BatchNorm(3)
    x = rng(6).normal(5.0, 3.0, size=(200, 3))
    y = bn.forward(x, training=True)
    assert np.allclose(y.mean(0), 0, atol=1e-10)
    assert np.allclose(y.var(0), 1, atol=1e-5)


def test_batchnorm_absent_columns():
    bn = nn.BatchNorm(4)
    x = rng(7).normal(size=(8, 4))
    x[:, 2:] = np.nan
    before_mean, before_var = bn.running_mean.copy(), bn.running_var.copy()
    y = bn.forward(x, training=True, present=np.array([True, True, False, False]))
    assert np.all(np.isfinite(y))
    assert not y[:, 2:].any()
    assert np.array_equal(bn.running_mean[2:], before_mean[2:])
    assert np.array_equal(bn.running_var[2:], before_var[2:])
    assert not np.array_equal(bn.running_mean[:2], before_mean[:2])
    dx = bn.backward(np.ones((8, 4)))
    assert not dx[:, 2:].any() and not bn.grads[0][2:].any() and not bn.grads[1][2:].any()


def test_batchnorm_inference_two_batch_oracle():
    bn = nn.BatchNorm(2, momentum=0.1)
    a = rng(8).normal(size=(10, 2))
    b = rng(9).normal(2.0, 4.0, size=(10, 2))
    bn.forward(a, training=True)
    bn.forward(b, training=True)
    mean = 0.9 * (0.9 * 0 + 0.1 * a.mean(0)) + 0.1 * b.mean(0)
    var = 0.9 * (0.9 * 1 + 0.1 * a.var(0, ddof=1)) + 0.1 * b.var(0, ddof=1)
    assert np.allclose(bn.running_mean, mean)
    assert np.allclose(bn.running_var, var)
    x = rng(10).normal(size=(3, 2))
    assert np.allclose(bn.forward(x, training=False), (x - mean) / np.sqrt(var + bn.eps))


def test_batchnorm_needs_two_rows():
    with pytest.raises(ValueError):
        nn.BatchNorm(2).forward(np.zeros((1, 2)), training=True)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_finite_differences(training):
    bn = nn.BatchNorm(4)
    bn.gamma[:] = rng(11).uniform(0.5, 1.5, 4)
    bn.beta[:] = rng(12).normal(size=4)
    bn.running_mean[:] = rng(13).normal(size=4)
    x = rng(14).normal(size=(6, 4))
    c = rng(15).normal(size=(6, 4))
    present = np.array([True, False, True, True])
    state = [a.copy() for a in bn.buffers()]

    def f():
        # fresh running stats so repeated training passes see identical state
        for buf, s in zip(bn.buffers(), state):
            buf[...] = s
        return float(np.sum(bn.forward(x, training, present) * c))

    f()
    dx = bn.backward(c)
    grads = [g.copy() for g in bn.grads]
    assert rel_err(dx, numerical_grad(f, x)) < 1e-5
    assert rel_err(grads[0], numerical_grad(f, bn.gamma)) < 1e-5
    assert rel_err(grads[1], numerical_grad(f, bn.beta)) < 1e-5


# loss

def test_loss_confident_and_uniform():
    labels = np.array([0, 2, 1])
    loss, _ = nn.loss_and_grad(np.eye(3)[labels] * 1000, labels, "multiclass")
    assert loss == pytest.approx(0, abs=1e-12)
    loss, _ = nn.loss_and_grad(np.zeros((3, 5)), labels, "multiclass")
    assert loss == pytest.approx(math.log(5))
    loss, _ = nn.loss_and_grad(np.array([[1000.0], [-1000.0]]), np.array([1, 0]), "binary")
    assert loss == pytest.approx(0, abs=1e-12)
    loss, _ = nn.loss_and_grad(np.zeros((4, 1)), np.array([1, 0, 1, 0]), "binary")
    assert loss == pytest.approx(math.log(2))


def test_loss_label_errors():
    with pytest.raises(ValueError):
        nn.loss_and_grad(np.zeros((2, 3)), np.array([0, 3]), "multiclass")
    with pytest.raises(ValueError):
        nn.loss_and_grad(np.zeros((2, 1)), np.array([0, 2]), "binary")
    with pytest.raises(ValueError):
        nn.loss_and_grad(np.zeros((2, 1)), np.array([0, 1]), "regression")


@pytest.mark.parametrize("task,cols", [("binary", 1), ("multiclass", 4)])
def test_loss_finite_differences(task, cols):
    z = rng(16).normal(size=(7, cols)) * 2
    labels = rng(17).integers(0, 2 if task == "binary" else cols, 7)
    _, grad = nn.loss_and_grad(z, labels, task)
    num = numerical_grad(lambda: nn.loss_and_grad(z, labels, task)[0], z, eps=1e-5)
    assert np.max(np.abs(grad - num)) < 1e-5


# optimizer

def test_sgd():
    p = [np.array([1.0, 2.0])]
    nn.sgd_apply(p, [np.zeros(2)], 0.01)
    assert p[0].tolist() == [1.0, 2.0]
    with pytest.raises(nn.ShapeError):
        nn.sgd_apply(p, [np.zeros(3)], 0.01)
    # one step on 0.5 * |w - 3|^2 moves toward the minimum
    w = np.array([0.0])
    before = 0.5 * float((w - 3) @ (w - 3))
    nn.sgd_apply([w], [w - 3], 0.01)
    assert 0.5 * float((w - 3) @ (w - 3)) < before


# metrics

def test_auc_examples():
    assert nn.metric_auc([0.9, 0.1], [1, 0]) == 1.0
    assert nn.metric_auc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5
    assert nn.metric_auc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        nn.metric_auc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_matches_pair_enumeration(pairs):
    scores, labels = zip(*pairs)
    if len(set(labels)) < 2:
        return
    assert nn.metric_auc(scores, labels) == pytest.approx(pairwise_auc(scores, labels))


def test_accuracy():
    assert nn.metric_accuracy([1, 0, 2], [1, 1, 2]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        nn.metric_accuracy([], [])


# split structure

def test_split_sum_equivalence():
    r = rng(18)
    x0, x1, x2 = r.normal(size=(5, 3)), r.normal(size=(5, 2)), r.normal(size=(5, 4))
    f0 = nn.Dense(3, 6, bias=True, rng=r)
    f1 = nn.Dense(2, 2, bias=False, rng=r)
    f2 = nn.Dense(4, 4, bias=False, rng=r)
    split = f0.forward(x0) + np.hstack([f1.forward(x1), f2.forward(x2)])
    # monolithic layer over concatenated features with block-structured weights
    w = np.zeros((9, 6))
    w[:3] = f0.weight
    w[3:5, :2] = f1.weight
    w[5:, 2:] = f2.weight
    mono = nn.dense_forward(w, f0.bias, np.hstack([x0, x1, x2]))
    assert np.allclose(split, mono, rtol=0, atol=1e-12)


def test_per_client_gradients_sum_to_full_batch():
    r = rng(19)
    x = r.normal(size=(12, 4))
    dy = r.normal(size=(12, 3))
    net = nn.mlp([4, 5, 3], bias=False, rng=r)
    net.forward(x)
    net.backward(dy)
    full = nn.flatten(net.grads())
    owners = r.integers(0, 3, 12)
    parts = []
    for k in range(3):
        rows = np.flatnonzero(owners == k)
        net.forward(x[rows])
        net.backward(dy[rows])
        parts.append(nn.flatten(net.grads()))
    assert np.max(np.abs(sum(parts) - full)) < 1e-6


def test_top_model_finite_differences():
    top = nn.TopModel(6, hidden=(5,), n_out=3, rng=rng(20))
    h = rng(21).normal(size=(8, 6))
    h[:, 4:] = np.nan
    presence = np.array([True] * 4 + [False] * 2)
    labels = rng(22).integers(0, 3, 8)
    state = [b.copy() for b in top.bn.buffers()]

    def loss_at(x):
        for buf, s in zip(top.bn.buffers(), state):
            buf[...] = s
        return nn.loss_and_grad(top.forward(x, presence, True), labels, "multiclass")[0]

    def f():
        return loss_at(h)

    f()
    _, d = nn.loss_and_grad(top.forward(h, presence, True), labels, "multiclass")
    dh = top.backward(d)
    grads = [g.copy() for g in top.grads()]
    assert not np.isnan(dh).any() and not dh[:, 4:].any()
    hp = np.where(presence, h, 0.0)
    num = numerical_grad(lambda: loss_at(hp), hp)
    assert rel_err(dh[:, :4], num[:, :4]) < 1e-3
    for p, g in zip(top.params(), grads):
        assert rel_err(g, numerical_grad(f, p)) < 1e-3


# flat params and checkpoints

def test_flatten_assign():
    arrays = [np.zeros((2, 2)), np.zeros(3)]
    nn.assign_flat(arrays, np.arange(7.0))
    assert arrays[0].tolist() == [[0, 1], [2, 3]] and arrays[1].tolist() == [4, 5, 6]
    assert nn.flatten(arrays).tolist() == list(range(7))
    with pytest.raises(nn.ShapeError):
        nn.assign_flat(arrays, np.zeros(6))


def test_checkpoint_roundtrip():
    r = rng(23)
    model = nn.SplitModel(nn.mlp([3, 4], rng=r), {1: nn.mlp([2, 2], bias=False, rng=r)}, nn.TopModel(4, rng=r))
    blob = nn.dump_tensors(model.tensors())
    assert blob[:4] == b"VFSC"
    other = nn.SplitModel(nn.mlp([3, 4], rng=rng(99)), {1: nn.mlp([2, 2], bias=False, rng=rng(98))},
                          nn.TopModel(4, rng=rng(97)))
    nn.restore_tensors(other.tensors(), nn.load_tensors(blob))
    assert nn.dump_tensors(other.tensors()) == blob
    with pytest.raises(nn.ShapeError):
        wrong = nn.SplitModel(nn.mlp([3, 5], rng=r), {1: nn.mlp([2, 2], bias=False, rng=r)}, nn.TopModel(5, rng=r))
        nn.restore_tensors(wrong.tensors(), nn.load_tensors(blob))
    with pytest.raises(ValueError):
        nn.load_tensors(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        nn.load_tensors(blob + b"\0")
