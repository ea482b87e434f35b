"""Independent reference computations used by the tests."""

import numpy as np
from scipy.stats import chi2, norm


def numerical_grad(f, x, eps=1e-4):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def chi2_uniform_pvalues(values, buckets=256, modulus=1 << 32):
    """Per-column chi-square p-values of ``values`` (draws x columns) against uniform buckets."""
    idx = (values.astype(np.uint64) * buckets // modulus).astype(np.int64)
    draws = values.shape[0]
    expected = draws / buckets
    out = []
    for col in idx.T:
        counts = np.bincount(col, minlength=buckets)
        stat = ((counts - expected) ** 2 / expected).sum()
        out.append(chi2.sf(stat, buckets - 1))
    return np.array(out)


class PlainSplitOracle:
    """Float64 split learning with concatenated embeddings and no secure layer.

    Bottoms are single affine maps (biased for the active party, unbiased for
    groups), the head is BatchNorm followed by one dense layer, the loss is
    mean logistic loss, and every party takes a plain SGD step.
    """

    def __init__(self, x_active, x_groups, labels, w0, b0, w_groups, gamma, beta, w_top, b_top,
                 lr=0.01, momentum=0.1, eps=1e-5):
        self.x0, self.xg, self.y = x_active, x_groups, labels.astype(np.float64)
        self.w0, self.b0 = w0.copy(), b0.copy()
        self.wg = [w.copy() for w in w_groups]
        self.gamma, self.beta = gamma.copy(), beta.copy()
        self.w_top, self.b_top = w_top.copy(), b_top.copy()
        self.mu = np.zeros_like(gamma)
        self.var = np.ones_like(gamma)
        self.lr, self.momentum, self.eps = lr, momentum, eps

    def _embed(self, ids):
        return self.x0[ids] @ self.w0 + self.b0 + np.hstack([x[ids] @ w for x, w in zip(self.xg, self.wg)])

    def step(self, ids):
        h = self._embed(ids)
        n = h.shape[0]
        mu, var = h.mean(0), h.var(0)
        self.mu = (1 - self.momentum) * self.mu + self.momentum * mu
        self.var = (1 - self.momentum) * self.var + self.momentum * var * n / (n - 1)
        inv = 1 / np.sqrt(var + self.eps)
        xhat = (h - mu) * inv
        a = self.gamma * xhat + self.beta
        z = (a @ self.w_top + self.b_top).ravel()
        y = self.y[ids]
        loss = np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0) - y * z)
        dz = ((1 / (1 + np.exp(-z))) - y)[:, None] / n
        d_w_top, d_b_top = a.T @ dz, dz.sum(0)
        da = dz @ self.w_top.T
        d_gamma, d_beta = (da * xhat).sum(0), da.sum(0)
        dxhat = da * self.gamma
        dh = inv / n * (n * dxhat - dxhat.sum(0) - xhat * (dxhat * xhat).sum(0))
        # embedding gradients were computed with the pre-update head
        self.w_top -= self.lr * d_w_top
        self.b_top -= self.lr * d_b_top
        self.gamma -= self.lr * d_gamma
        self.beta -= self.lr * d_beta
        self.w0 -= self.lr * self.x0[ids].T @ dh
        self.b0 -= self.lr * dh.sum(0)
        col = 0
        for i, (x, w) in enumerate(zip(self.xg, self.wg)):
            width = w.shape[1]
            self.wg[i] = w - self.lr * x[ids].T @ dh[:, col:col + width]
            col += width
        return float(loss)

    def logits(self, ids):
        h = self._embed(ids)
        a = self.gamma * (h - self.mu) / np.sqrt(self.var + self.eps) + self.beta
        return (a @ self.w_top + self.b_top).ravel()


def bayes_auc_mc(class_sep, d, n=200_000, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.random(n) < 0.5
    x = rng.standard_normal((n, d)) + (y[:, None] - 0.5) * class_sep
    score = x.sum(1)
    pos, neg = np.sort(score[y]), score[~y]
    # for each negative, the positives strictly above it
    above = pos.size - np.searchsorted(pos, neg, side="right")
    return float(above.sum() / (pos.size * neg.size))


def bayes_accuracy_mc(class_sep, d, n=200_000, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.random(n) < 0.5
    x = rng.standard_normal((n, d)) + (y[:, None] - 0.5) * class_sep
    return float(np.mean((x.sum(1) > 0) == y))


def phi(z):
    return float(norm.cdf(z))
