"""Minimal numpy layers with explicit reverse-mode gradients.

Each layer caches what it needs in ``forward`` and returns the input
gradient from ``backward``; parameter gradients land in ``layer.grads``.
Arrays are NCHW, float64.
"""

from __future__ import annotations

import numpy as np


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv2d(Layer):
    """3x3 (or ``k``-square) convolution with stride and zero padding."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3, stride: int = 2, pad: int = 1, bias: bool = True):
        super().__init__()
        self.k, self.stride, self.pad = k, stride, pad
        scale = np.sqrt(2.0 / (c_in * k * k))
        self.params["w"] = rng.standard_normal((c_out, c_in, k, k)) * scale
        if bias:
            self.params["b"] = np.zeros(c_out)
        self._cache = None

    def out_size(self, h: int) -> int:
        return (h + 2 * self.pad - self.k) // self.stride + 1

    def forward(self, x):
        b, c, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        ho, wo = self.out_size(h), self.out_size(w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((b, ho, wo, c, k, k))
        for i in range(k):
            for j in range(k):
                cols[:, :, :, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s].transpose(0, 2, 3, 1)
        cols = cols.reshape(b * ho * wo, c * k * k)
        wmat = self.params["w"].reshape(self.params["w"].shape[0], -1)
        out = cols @ wmat.T
        if "b" in self.params:
            out += self.params["b"]
        self._cache = (x.shape, cols)
        return out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, dout):
        (b, c, h, w), cols = self._cache
        k, s, p = self.k, self.stride, self.pad
        c_out, ho, wo = dout.shape[1:]
        d2 = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
        wshape = self.params["w"].shape
        self.grads["w"] = (d2.T @ cols).reshape(wshape)
        if "b" in self.params:
            self.grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ self.params["w"].reshape(c_out, -1)).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        b, c, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (h * w), self._shape).copy()


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, scale: float | None = None):
        super().__init__()
        scale = np.sqrt(1.0 / n_in) if scale is None else scale
        self.params["w"] = rng.standard_normal((n_out, n_in)) * scale
        if bias:
            self.params["b"] = np.zeros(n_out)

    def forward(self, x):
        self._x = x
        out = x @ self.params["w"].T
        if "b" in self.params:
            out = out + self.params["b"]
        return out

    def backward(self, dout):
        self.grads["w"] = dout.T @ self._x
        if "b" in self.params:
            self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"]


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_layers(self, prefix: str):
        for i, layer in enumerate(self.layers):
            if layer.params:
                yield f"{prefix}{i}", layer


class SGDMomentum:
    """Heavy-ball SGD; state is keyed by parameter name."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for name in sorted(params):
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(params[name])
            v = self.momentum * v - lr * grads[name]
            self.velocity[name] = v
            params[name] += v
