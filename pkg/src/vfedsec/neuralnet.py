"""Small numpy network engine with hand-written backward passes."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class ShapeError(ValueError):
    pass


# functional kernels

def dense_forward(weight, bias, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"input {x.shape} does not match weight {weight.shape}")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def dense_backward(weight, bias, x, dy):
    """Returns (dx, dW, db); db is None for an unbiased layer."""
    if dy.shape != (x.shape[0], weight.shape[1]):
        raise ShapeError(f"upstream gradient {dy.shape} does not match output")
    dx = dy @ weight.T
    dw = x.T @ dy
    db = dy.sum(axis=0) if bias is not None else None
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dy):
    return dy * (x > 0)


# layers

class Dense:
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_dim)
        self.weight = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.bias = rng.uniform(-bound, bound, size=out_dim) if bias else None
        self._x = None
        self.grads: list[np.ndarray] = []

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x, training=True):
        self._x = np.asarray(x, dtype=np.float64)
        return dense_forward(self.weight, self.bias, self._x)

    def backward(self, dy):
        if self._x is None:
            raise RuntimeError("backward called before forward")
        dx, dw, db = dense_backward(self.weight, self.bias, self._x, dy)
        self.grads = [dw] if db is None else [dw, db]
        return dx


class ReLU:
    grads: list = []

    def __init__(self):
        self._x = None

    def params(self):
        return []

    def forward(self, x, training=True):
        self._x = x
        return relu_forward(x)

    def backward(self, dy):
        return relu_backward(self._x, dy)


class BatchNorm:
    """Batch normalization whose absent columns output zeros.

    Absent columns keep their running statistics and receive no parameter
    gradient, so the N/A segments of a dropped group never leak NaN or stale
    values into the layers above.
    """

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps
        self.grads: list[np.ndarray] = []
        self._cache = None

    @property
    def width(self):
        return self.gamma.shape[0]

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x, training=True, present=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.width:
            raise ShapeError(f"BatchNorm expects width {self.width}, got {x.shape}")
        present = np.ones(self.width, dtype=bool) if present is None else np.asarray(present, dtype=bool)
        if present.shape != (self.width,):
            raise ShapeError("presence vector has the wrong width")
        # absent columns may hold anything, NaN included
        xs = np.where(present, x, 0.0)
        if training:
            if x.shape[0] < 2:
                raise ValueError("batch statistics need at least 2 rows")
            mean = xs.mean(axis=0)
            var = xs.var(axis=0)
            n = x.shape[0]
            m = self.momentum
            self.running_mean[present] = (1 - m) * self.running_mean[present] + m * mean[present]
            self.running_var[present] = (1 - m) * self.running_var[present] + m * var[present] * n / (n - 1)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (xs - mean) * inv_std
        y = np.where(present, self.gamma * xhat + self.beta, 0.0)
        self._cache = (xhat, inv_std, present, training)
        return y

    def backward(self, dy):
        xhat, inv_std, present, training = self._cache
        dy = np.where(present, dy, 0.0)
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * self.gamma
        if training:
            n = dy.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        self.grads = [np.where(present, dgamma, 0.0), np.where(present, dbeta, 0.0)]
        return np.where(present, dx, 0.0)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=True):
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    @property
    def out_dim(self):
        dense = [layer for layer in self.layers if isinstance(layer, Dense)]
        return dense[-1].out_dim


def mlp(widths, bias=True, rng=None) -> Sequential:
    """Dense layers through ``widths`` with ReLU between them (none after the last)."""
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        if i:
            layers.append(ReLU())
        layers.append(Dense(a, b, bias=bias, rng=rng))
    return Sequential(layers)


class TopModel:
    """Server head: BatchNorm at the embedding input, then a dense stack."""

    def __init__(self, width: int, hidden=(), n_out: int = 1, rng=None):
        self.bn = BatchNorm(width)
        self.head = mlp([width, *hidden, n_out], bias=True, rng=rng)
        self.presence = np.ones(width, dtype=bool)

    def forward(self, h, presence=None, training=True):
        self.presence = np.ones(self.bn.width, dtype=bool) if presence is None else np.asarray(presence, bool)
        return self.head.forward(self.bn.forward(h, training, self.presence), training)

    def backward(self, d_logits):
        return self.bn.backward(self.head.backward(d_logits))

    def params(self):
        return self.bn.params() + self.head.params()

    def grads(self):
        return self.bn.grads + self.head.grads()


# losses, optimizer, metrics

def loss_and_grad(logits, labels, task: str = "binary"):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    b = logits.shape[0]
    if task == "binary":
        z = logits.reshape(b)
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("binary labels must be 0 or 1")
        y = labels.astype(np.float64).reshape(b)
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return float(loss), ((p - y) / b).reshape(logits.shape)
    if task == "multiclass":
        n = logits.shape[1]
        labels = labels.astype(np.int64).reshape(b)
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
            raise ValueError(f"class labels must lie in [0, {n})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        loss = -np.mean(log_p[np.arange(b), labels])
        grad = np.exp(log_p)
        grad[np.arange(b), labels] -= 1.0
        return float(loss), grad / b
    raise ValueError(f"unknown task {task!r}")


def sgd_apply(params, grads, lr: float):
    if len(params) != len(grads):
        raise ShapeError("parameter and gradient lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        p -= lr * g
    return params


def metric_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def metric_accuracy(preds, labels) -> float:
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.size != labels.size or preds.size == 0:
        raise ValueError("predictions and labels must be non-empty and aligned")
    return float(np.mean(preds == labels))


# flat parameter helpers

def flatten(arrays) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def assign_flat(arrays, flat) -> None:
    flat = np.asarray(flat, dtype=np.float64)
    total = sum(a.size for a in arrays)
    if flat.size != total:
        raise ShapeError(f"flat vector has {flat.size} entries, parameters need {total}")
    offset = 0
    for a in arrays:
        a[...] = flat[offset:offset + a.size].reshape(a.shape)
        offset += a.size


# checkpoint: b"VFSC", u32 tensor count, per tensor u32 rows, u32 cols, f64 LE data

_MAGIC = b"VFSC"


@dataclass
class SplitModel:
    bottom_active: Sequential
    bottoms: dict[int, Sequential]
    top: TopModel

    def tensors(self):
        out = list(self.bottom_active.params())
        for gid in sorted(self.bottoms):
            out.extend(self.bottoms[gid].params())
        out.extend(self.top.params())
        out.extend(self.top.bn.buffers())
        return out


def _as2d(a):
    return a.reshape(1, -1) if a.ndim == 1 else a


def dump_tensors(tensors) -> bytes:
    parts = [_MAGIC, struct.pack("<I", len(tensors))]
    for t in tensors:
        rows, cols = _as2d(t).shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(parts)


def load_tensors(buf: bytes) -> list[np.ndarray]:
    if buf[:4] != _MAGIC:
        raise ValueError("not a checkpoint")
    (count,) = struct.unpack_from("<I", buf, 4)
    offset, out = 8, []
    for _ in range(count):
        rows, cols = struct.unpack_from("<II", buf, offset)
        offset += 8
        n = rows * cols
        out.append(np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(rows, cols))
        offset += 8 * n
    if offset != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return out


def restore_tensors(targets, loaded) -> None:
    if len(targets) != len(loaded):
        raise ShapeError(f"checkpoint has {len(loaded)} tensors, model has {len(targets)}")
    for t, v in zip(targets, loaded):
        if _as2d(t).shape != v.shape:
            raise ShapeError(f"checkpoint tensor {v.shape} does not fit {t.shape}")
        t[...] = v.reshape(t.shape)
