"""Small trainable networks with analytic gradients.

Convolution here is computed by shift-and-accumulate over kernel offsets,
deliberately independent of the inference engine's im2col lowering so the
two paths can check each other.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from sparsenn.errors import ParameterError, ShapeError, UnsupportedError


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        if len(self.x_train) == 0:
            raise ParameterError("training set is empty")
        if len(self.x_train) != len(self.y_train) or len(self.x_test) != len(self.y_test):
            raise ShapeError("image and label counts differ")

    def subset(self, n_train: int | None = None, n_test: int | None = None) -> "Dataset":
        return Dataset(self.x_train[:n_train], self.y_train[:n_train], self.x_test[:n_test], self.y_test[:n_test])


class Dense:
    """y = x W^T + b with W shaped (out, in); inputs are flattened per sample."""

    def __init__(self, w: np.ndarray, b: np.ndarray):
        self.w, self.b = w, b
        self.dw, self.db = np.zeros_like(w), np.zeros_like(b)

    def forward(self, x):
        self._shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        if self._x.shape[1] != self.w.shape[1]:
            raise ShapeError(f"dense layer expects {self.w.shape[1]} features, got {self._x.shape[1]}")
        return self._x @ self.w.T + self.b

    def backward(self, dy):
        self.dw[...] = dy.T @ self._x
        self.db[...] = dy.sum(axis=0)
        return (dy @ self.w).reshape(self._shape)


class Conv2D:
    """NCHW convolution, weights (K, C, kh, kw)."""

    def __init__(self, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 0):
        self.w, self.b = w, b
        self.stride, self.padding = stride, padding
        self.dw, self.db = np.zeros_like(w), np.zeros_like(b)

    def _slices(self, ho, wo):
        s = self.stride
        for i in range(self.w.shape[2]):
            for j in range(self.w.shape[3]):
                yield i, j, (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.w.shape[1]:
            raise ShapeError(f"conv expects (N, {self.w.shape[1]}, H, W), got {x.shape}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        kh, kw = self.w.shape[2:]
        ho = (xp.shape[2] - kh) // self.stride + 1
        wo = (xp.shape[3] - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError("kernel larger than padded input")
        self._xp, self._out = xp, (ho, wo)
        y = np.zeros((x.shape[0], self.w.shape[0], ho, wo), dtype=x.dtype)
        for i, j, sl in self._slices(ho, wo):
            y += np.einsum("kc,nchw->nkhw", self.w[:, :, i, j], xp[sl], optimize=True)
        return y + self.b.reshape(1, -1, 1, 1)

    def backward(self, dy):
        xp = self._xp
        dxp = np.zeros_like(xp)
        for i, j, sl in self._slices(*self._out):
            self.dw[:, :, i, j] = np.einsum("nkhw,nchw->kc", dy, xp[sl], optimize=True)
            dxp[sl] += np.einsum("kc,nkhw->nchw", self.w[:, :, i, j], dy, optimize=True)
        self.db[...] = dy.sum(axis=(0, 2, 3))
        p = self.padding
        return dxp[:, :, p:dxp.shape[2] - p, p:dxp.shape[3] - p] if p else dxp


class ReLU:
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool2D:
    def __init__(self, window: int, stride: int):
        self.window, self.stride = window, stride

    def forward(self, x):
        k, s = self.window, self.stride
        ho = (x.shape[2] - k) // s + 1
        wo = (x.shape[3] - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError("pool window larger than input")
        self._shape, self._out = x.shape, (ho, wo)
        stack = np.stack([x[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                          for i in range(k) for j in range(k)])
        self._arg = stack.argmax(axis=0)
        return np.take_along_axis(stack, self._arg[None], axis=0)[0]

    def backward(self, dy):
        k, s = self.window, self.stride
        ho, wo = self._out
        dx = np.zeros(self._shape, dtype=dy.dtype)
        for o in range(k * k):
            i, j = divmod(o, k)
            dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dy * (self._arg == o)
        return dx


PARAM_LAYERS = (Dense, Conv2D)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


class TrainableNet:
    def __init__(self, layers: list, input_shape: tuple[int, ...], classes: int):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.classes = classes

    @property
    def dtype(self):
        return self.param_layers()[0].w.dtype

    def param_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, PARAM_LAYERS)]

    def weights(self) -> list[np.ndarray]:
        return [l.w for l in self.param_layers()]

    def copy(self) -> "TrainableNet":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "TrainableNet":
        net = self.copy()
        for l in net.param_layers():
            l.w, l.b = l.w.astype(dtype), l.b.astype(dtype)
            l.dw, l.db = np.zeros_like(l.w), np.zeros_like(l.b)
        return net

    def _prepare(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if tuple(x.shape[1:]) != self.input_shape:
            if int(np.prod(x.shape[1:])) != int(np.prod(self.input_shape)):
                raise ShapeError(f"batch shape {x.shape[1:]} does not match net input {self.input_shape}")
            x = x.reshape((x.shape[0],) + self.input_shape)
        return x

    def forward(self, x) -> np.ndarray:
        """Logits for a batch."""
        h = self._prepare(x)
        for l in self.layers:
            h = l.forward(h)
        return h

    def predict(self, x, batch: int = 1000) -> np.ndarray:
        return np.concatenate([self.forward(x[i:i + batch]).argmax(axis=1) for i in range(0, len(x), batch)])

    def accuracy(self, x, y, batch: int = 1000) -> float:
        return float((self.predict(x, batch) == y).mean())


def forward_backward(net: TrainableNet, x, labels) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean cross-entropy loss and (dW, db) for every parameter layer."""
    labels = np.asarray(labels)
    if labels.shape != (len(x),):
        raise ShapeError(f"expected {len(x)} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= net.classes):
        raise ShapeError("label outside class range")
    logits = net.forward(x)
    loss, g = softmax_cross_entropy(logits, labels)
    for l in reversed(net.layers):
        g = l.backward(g)
    return loss, [(l.dw, l.db) for l in net.param_layers()]


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def dense(rng, n_in, n_out, dtype=np.float32) -> Dense:
    return Dense(_he(rng, (n_out, n_in), n_in, dtype), np.zeros(n_out, dtype=dtype))


def conv(rng, c_in, c_out, k, stride=1, padding=0, dtype=np.float32) -> Conv2D:
    return Conv2D(_he(rng, (c_out, c_in, k, k), c_in * k * k, dtype), np.zeros(c_out, dtype=dtype), stride, padding)


def build_net(name: str, seed: int = 0, dtype=np.float32) -> TrainableNet:
    rng = np.random.default_rng(seed)
    if name == "lenet_300_100":
        layers = [dense(rng, 784, 300, dtype), ReLU(), dense(rng, 300, 100, dtype), ReLU(), dense(rng, 100, 10, dtype)]
        return TrainableNet(layers, (784,), 10)
    if name == "lenet5":
        layers = [
            conv(rng, 1, 6, 5, padding=2, dtype=dtype), ReLU(), MaxPool2D(2, 2),
            conv(rng, 6, 16, 5, dtype=dtype), ReLU(), MaxPool2D(2, 2),
            dense(rng, 400, 120, dtype), ReLU(), dense(rng, 120, 84, dtype), ReLU(), dense(rng, 84, 10, dtype),
        ]
        return TrainableNet(layers, (1, 28, 28), 10)
    raise UnsupportedError(f"no trainable architecture named {name!r}")
