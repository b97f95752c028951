"""Small fully-connected networks with hand-written backprop and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(z, a, kind):
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, width: int) -> "BatchNorm":
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width))


@dataclass
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray
    activation: str = "relu"
    bn: Optional[BatchNorm] = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def init_layer(fan_in: int, fan_out: int, activation: str, rng: np.random.Generator,
               batchnorm: bool = False) -> Layer:
    if activation == "relu":
        std = np.sqrt(2.0 / fan_in)  # He-normal
    else:
        std = np.sqrt(2.0 / (fan_in + fan_out))  # Xavier-normal
    W = rng.normal(0.0, std, size=(fan_in, fan_out))
    # small positive ReLU bias keeps all-zero input rows off the kink at z=0
    b = np.full(fan_out, 0.01 if activation == "relu" else 0.0)
    return Layer(W, b, activation, BatchNorm.fresh(fan_out) if batchnorm else None)


@dataclass
class DenseNet:
    layers: list = field(default_factory=list)

    @classmethod
    def build(cls, widths, activations, rng, batchnorm=None) -> "DenseNet":
        """``widths`` includes the input width: [in, h1, ..., out]."""
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        batchnorm = batchnorm or [False] * len(activations)
        layers = [
            init_layer(widths[i], widths[i + 1], activations[i], rng, batchnorm[i])
            for i in range(len(activations))
        ]
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    def params(self) -> list:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
            if layer.bn is not None:
                out += [layer.bn.gamma, layer.bn.beta]
        return out

    def copy(self) -> "DenseNet":
        layers = []
        for L in self.layers:
            bn = None
            if L.bn is not None:
                bn = BatchNorm(L.bn.gamma.copy(), L.bn.beta.copy(),
                               L.bn.running_mean.copy(), L.bn.running_var.copy())
            layers.append(Layer(L.W.copy(), L.b.copy(), L.activation, bn))
        return DenseNet(layers)

    def forward(self, x, train: bool = False, dropout: float = 0.0, rng=None):
        """Returns (output, cache).

        In train mode batch-norm uses batch statistics (running averages are not
        touched here; see :meth:`update_running_stats`). Dropout, if any, applies to
        every hidden layer output and only in train mode.
        """
        cache = []
        a = np.asarray(x, dtype=np.float64)
        last = len(self.layers) - 1
        for i, L in enumerate(self.layers):
            inp = a
            z = inp @ L.W + L.b
            a = _act(z, L.activation)
            entry = {"inp": inp, "z": z, "a": a}
            if L.bn is not None:
                if train:
                    mu = a.mean(axis=0)
                    var = a.var(axis=0)
                else:
                    mu, var = L.bn.running_mean, L.bn.running_var
                inv = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (a - mu) * inv
                a = L.bn.gamma * xhat + L.bn.beta
                entry.update(xhat=xhat, inv=inv, mu=mu, var=var, bn_train=train)
            if train and dropout > 0.0 and i < last:
                keep = (rng.random(a.shape) >= dropout) / (1.0 - dropout)
                a = a * keep
                entry["mask"] = keep
            cache.append(entry)
        return a, cache

    def backward(self, cache, dout):
        """Returns (grads aligned with :meth:`params`, gradient w.r.t. the input)."""
        grads = []
        g = dout
        for L, entry in zip(reversed(self.layers), reversed(cache)):
            layer_grads = []
            if "mask" in entry:
                g = g * entry["mask"]
            if L.bn is not None:
                xhat = entry["xhat"]
                dgamma = (g * xhat).sum(axis=0)
                dbeta = g.sum(axis=0)
                dxhat = g * L.bn.gamma
                if entry["bn_train"]:
                    m = g.shape[0]
                    g = (entry["inv"] / m) * (
                        m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                    )
                else:
                    g = dxhat * entry["inv"]
                layer_grads = [dgamma, dbeta]
            dz = g * _act_grad(entry["z"], entry["a"], L.activation)
            dW = entry["inp"].T @ dz
            db = dz.sum(axis=0)
            g = dz @ L.W.T
            grads = [dW, db] + layer_grads + grads
        return grads, g

    def update_running_stats(self, cache, momentum: float = BN_MOMENTUM) -> None:
        for L, entry in zip(self.layers, cache):
            if L.bn is not None and entry.get("bn_train"):
                L.bn.running_mean[:] = (1 - momentum) * L.bn.running_mean + momentum * entry["mu"]
                L.bn.running_var[:] = (1 - momentum) * L.bn.running_var + momentum * entry["var"]

    def __call__(self, x):
        return self.forward(x)[0]


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the last one is padded by wrap-around."""
    perm = rng.permutation(n)
    if n < batch_size:
        reps = -(-batch_size // n)
        yield np.tile(perm, reps)[:batch_size]
        return
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if idx.size < batch_size:
            idx = np.concatenate([idx, perm[: batch_size - idx.size]])
        yield idx


def finite_difference_check(loss_fn, params, grads, n_checks=50, step=1e-5, rng=None):
    """Max relative error between ``grads`` and central differences of ``loss_fn``.

    ``loss_fn()`` must read the current values of ``params`` (perturbed in place).
    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``.
    """
    rng = rng or np.random.default_rng(0)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_checks, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p = params[k].reshape(-1)
        j = flat - offsets[k]
        orig = p[j]
        p[j] = orig + step
        up = loss_fn()
        p[j] = orig - step
        down = loss_fn()
        p[j] = orig
        num = (up - down) / (2 * step)
        ana = grads[k].reshape(-1)[j]
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
        worst = max(worst, rel)
    return worst
