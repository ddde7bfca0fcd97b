"""Small feed-forward network core with explicit reverse-mode gradients.

Float64 throughout so analytic gradients can be checked against central
finite differences to tight tolerances.  Weights use fan-in-scaled uniform
initialization; biases start at zero.
"""

from __future__ import annotations

import numpy as np


def _act(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(0.0, pre)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0.0).astype(pre.dtype)
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected layers with a linear output head."""

    def __init__(self, widths: list[int], activation: str = "tanh",
                 rng: np.random.Generator | None = None):
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        self.widths = list(widths)
        self.activation = activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = rng or np.random.default_rng(0)
        for fan_in, fan_out in zip(widths, widths[1:]):
            limit = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        """Returns (output, cache); cache feeds backward()."""
        cache = []
        h = x
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            pre = h @ W + b
            post = pre if i == self.n_layers - 1 else _act(self.activation, pre)
            cache.append((h, pre, post))
            h = post
        return h, cache

    def backward(self, cache: list, dout: np.ndarray) -> tuple[list, np.ndarray]:
        """Gradients for every parameter plus the gradient w.r.t. the input."""
        grads = [None] * self.n_layers
        delta = dout
        for i in range(self.n_layers - 1, -1, -1):
            h, pre, post = cache[i]
            if i != self.n_layers - 1:
                delta = delta * _act_grad(self.activation, pre, post)
            dW = h.T @ delta
            db = delta.sum(axis=0)
            grads[i] = (dW, db)
            delta = delta @ self.weights[i].T
        return grads, delta

    # -- parameter plumbing ------------------------------------------------

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def grads_flat(self, grads: list) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for dW, db in grads:
            out.extend((dW, db))
        return out

    def copy(self) -> "Mlp":
        m = Mlp.__new__(Mlp)
        m.widths = list(self.widths)
        m.activation = self.activation
        m.weights = [W.copy() for W in self.weights]
        m.biases = [b.copy() for b in self.biases]
        return m


class Adam:
    """Adam with bias correction, one optimizer per parameter group."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
