"""Small feedforward networks with hand-written backpropagation.

Everything in the package that learns (dynamics heads, critics, policies)
is one of these: dense layers, ReLU on hidden layers, identity output.
Parameters are kept as a flat list ``[W0, b0, W1, b1, ...]`` and gradients
use the same layout, so optimizers can zip over them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SNAPSHOT_VERSION = 1
LOSSES = ("l2", "l1-smooth")


class NonFiniteError(FloatingPointError):
    """Raised when a training quantity stops being finite."""


@dataclass
class Network:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Network":
        return Network(list(self.layer_sizes),
                       [W.copy() for W in self.weights],
                       [b.copy() for b in self.biases])

    def forward(self, x):
        return forward(self, x)


def init_network(layer_sizes, seed) -> Network:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    sizes = [int(n) for n in layer_sizes]
    if len(sizes) < 2 or any(n < 1 for n in sizes):
        raise ValueError(f"invalid layer sizes {layer_sizes!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Network(sizes, weights, biases)


def _as_batch(net: Network, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.n_in:
        raise ValueError(f"expected input width {net.n_in}, got shape {x.shape}")
    return x, single


def forward(net: Network, x) -> np.ndarray:
    """Evaluate the network on one vector or on a batch of row vectors."""
    h, single = _as_batch(net, x)
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def forward_cached(net: Network, x: np.ndarray):
    """Batch forward pass that keeps the layer inputs for backprop."""
    h, _ = _as_batch(net, x)
    acts = [h]
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def backprop(net: Network, acts: list[np.ndarray], dy: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given dLoss/dOutput for a cached batch."""
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    delta = dy
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0.0)
    return grads


def loss_and_grad_output(y: np.ndarray, target: np.ndarray, loss: str,
                         sample_weight=None) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its gradient w.r.t. the outputs.

    Per-sample loss is summed over output components: ``sum (y - t)^2`` for
    ``l2`` and the Huber function with delta=1 for ``l1-smooth``.
    """
    diff = y - target
    if loss == "l2":
        per = diff ** 2
        dper = 2.0 * diff
    elif loss == "l1-smooth":
        a = np.abs(diff)
        quad = a <= 1.0
        per = np.where(quad, 0.5 * diff ** 2, a - 0.5)
        dper = np.where(quad, diff, np.sign(diff))
    else:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    n = y.shape[0]
    if sample_weight is None:
        w = np.full((n, 1), 1.0 / n)
    else:
        w = np.asarray(sample_weight, dtype=float).reshape(n, 1) / n
    return float((per * w).sum()), dper * w


def backward(net: Network, x, target, loss: str = "l2", sample_weight=None):
    """Loss value and analytic parameter gradients at ``(x, target)``.

    Batches use the mean of the per-sample losses.
    """
    xb, single = _as_batch(net, x)
    tb = np.asarray(target, dtype=float)
    if single:
        tb = tb[None, :]
    if tb.shape != (xb.shape[0], net.n_out):
        raise ValueError(f"target shape {tb.shape} does not match output width {net.n_out}")
    if not (np.all(np.isfinite(xb)) and np.all(np.isfinite(tb))):
        raise NonFiniteError("non-finite input or target")
    y, acts = forward_cached(net, xb)
    value, dy = loss_and_grad_output(y, tb, loss, sample_weight)
    return value, backprop(net, acts, dy)


def _check_finite(arrays, what):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite {what}")


class SGD:
    def __init__(self, lr: float = 1e-2):
        self.lr = lr

    def step(self, net: Network, grads: list[np.ndarray]) -> None:
        _check_finite(grads, "gradient")
        for p, g in zip(net.params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, net: Network, grads: list[np.ndarray]) -> None:
        _check_finite(grads, "gradient")
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(net.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str = "adam", lr: float = 1e-3):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(net: Network, grads, opt=None, kind: str = "adam", lr: float = 1e-3):
    """Apply one update in place and return ``(net, opt)``.

    Pass the returned optimizer back in to keep Adam's moment estimates.
    """
    if len(grads) != len(net.params) or any(
            g.shape != p.shape for g, p in zip(grads, net.params)):
        raise ValueError("gradient set is not congruent with the network")
    if opt is None:
        opt = make_optimizer(kind, lr)
    opt.step(net, grads)
    return net, opt


@dataclass
class Regressor:
    """A network bundled with its optimizer and a loss trace."""

    net: Network
    opt: object
    loss: str = "l2"
    trace: list[float] = field(default_factory=list)

    def fit(self, X: np.ndarray, Y: np.ndarray, steps: int, batch_size: int,
            rng: np.random.Generator, sample_weight=None) -> float:
        """Run ``steps`` minibatch updates; returns the mean minibatch loss."""
        n = X.shape[0]
        if n == 0:
            raise ValueError("empty training set")
        total = 0.0
        for _ in range(steps):
            idx = rng.integers(0, n, size=min(batch_size, n))
            w = None if sample_weight is None else sample_weight[idx]
            value, grads = backward(self.net, X[idx], Y[idx], self.loss, w)
            if not np.isfinite(value):
                raise NonFiniteError("training loss diverged")
            self.opt.step(self.net, grads)
            total += value
        return total / max(steps, 1)

    def fit_epochs(self, X: np.ndarray, Y: np.ndarray, epochs: int, batch_size: int,
                   rng: np.random.Generator, sample_weight=None) -> list[float]:
        """Shuffled passes over the data; records the full-data loss per epoch."""
        n = X.shape[0]
        if n == 0:
            raise ValueError("empty training set")
        out = []
        for _ in range(epochs):
            order = rng.permutation(n)
            for lo in range(0, n, batch_size):
                idx = order[lo:lo + batch_size]
                w = None if sample_weight is None else sample_weight[idx]
                _, grads = backward(self.net, X[idx], Y[idx], self.loss, w)
                self.opt.step(self.net, grads)
            full, _ = loss_and_grad_output(forward(self.net, X), Y, self.loss, sample_weight)
            if not np.isfinite(full):
                raise NonFiniteError("training loss diverged")
            out.append(full)
        self.trace += out
        return out


def to_snapshot(net: Network) -> str:
    """Text snapshot; floats are written with ``repr`` so loading is bit-exact."""
    doc = {
        "format_version": SNAPSHOT_VERSION,
        "layer_sizes": net.layer_sizes,
        "params": [p.ravel(order="C").tolist() for p in net.params],
    }
    return json.dumps(doc)


def from_snapshot(text: str) -> Network:
    doc = json.loads(text)
    if doc.get("format_version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('format_version')!r}")
    sizes = [int(n) for n in doc["layer_sizes"]]
    flat = doc["params"]
    if len(flat) != 2 * (len(sizes) - 1):
        raise ValueError("parameter count does not match layer sizes")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(np.array(flat[2 * i], dtype=float).reshape(fan_in, fan_out))
        biases.append(np.array(flat[2 * i + 1], dtype=float).reshape(fan_out))
    return Network(sizes, weights, biases)
