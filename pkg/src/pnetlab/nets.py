"""Float64 layers with analytic backward passes, and the stock architectures.

Images are channels-last ``(N, H, W, C)``.  Every layer caches what its
backward pass needs during ``forward``; call ``backward`` with the gradient
of the loss w.r.t. the layer output, it stores parameter gradients in
``grads`` and returns the gradient w.r.t. the input.
"""
from __future__ import annotations

import copy

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Conv2d",
    "Square",
    "AvgPool2d",
    "Linear",
    "FloatModel",
    "softmax",
    "cross_entropy",
    "toy_model",
    "mnist_cryptonets",
    "cifar_net",
    "build_arch",
]


class Layer:
    kind = "layer"

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, weight, bias, stride=1, padding=0):
        self.weight = np.asarray(weight, dtype=np.float64)  # (O, kh, kw, C)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.stride = int(stride)
        self.padding = int(padding)
        self.grads: dict[str, np.ndarray] = {}

    @classmethod
    def init(cls, rng, in_ch, out_ch, k, stride=1, padding=0):
        fan_in = k * k * in_ch
        w = rng.standard_normal((out_ch, k, k, in_ch)) / np.sqrt(fan_in)
        return cls(w, np.zeros(out_ch), stride, padding)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, shape):
        h, w, c = shape
        o, kh, kw, ci = self.weight.shape
        if c != ci:
            raise ShapeError(f"conv expects {ci} input channels, got {c}")
        p, s = self.padding, self.stride
        return ((h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1, o)

    def forward(self, x):
        o, kh, kw, c = self.weight.shape
        p, s = self.padding, self.stride
        self._xshape = x.shape
        if p:
            x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::s, ::s]
        n, ho, wo = win.shape[:3]
        self._cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
        out = self._cols @ self.weight.reshape(o, -1).T + self.bias
        return out.reshape(n, ho, wo, o)

    def backward(self, g):
        o, kh, kw, c = self.weight.shape
        n, ho, wo, _ = g.shape
        g2 = g.reshape(-1, o)
        self.grads = {
            "weight": (g2.T @ self._cols).reshape(self.weight.shape),
            "bias": g2.sum(axis=0),
        }
        dcols = (g2 @ self.weight.reshape(o, -1)).reshape(n, ho, wo, kh, kw, c)
        p, s = self.padding, self.stride
        _, h, w, _ = self._xshape
        dx = np.zeros((n, h + 2 * p, w + 2 * p, c))
        for i in range(kh):
            for j in range(kw):
                dx[:, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, i, j]
        return dx[:, p : p + h, p : p + w] if p else dx


class Square(Layer):
    kind = "square"

    def forward(self, x):
        self._x = x
        return x * x

    def backward(self, g):
        return 2.0 * self._x * g


class AvgPool2d(Layer):
    kind = "avgpool"

    def __init__(self, kernel=2):
        self.kernel = int(kernel)

    def output_shape(self, shape):
        h, w, c = shape
        return (h // self.kernel, w // self.kernel, c)

    def forward(self, x):
        k = self.kernel
        n, h, w, c = x.shape
        ho, wo = h // k, w // k
        self._xshape = x.shape
        return x[:, : ho * k, : wo * k].reshape(n, ho, k, wo, k, c).mean(axis=(2, 4))

    def backward(self, g):
        k = self.kernel
        dx = np.zeros(self._xshape)
        n, ho, wo, c = g.shape
        up = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        dx[:, : ho * k, : wo * k] = up
        return dx


class Linear(Layer):
    """Fully connected layer; flattens channels-last input first."""

    kind = "linear"

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)  # (out, in)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.grads: dict[str, np.ndarray] = {}

    @classmethod
    def init(cls, rng, n_in, n_out):
        return cls(rng.standard_normal((n_out, n_in)) / np.sqrt(n_in), np.zeros(n_out))

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def output_shape(self, shape):
        n_in = int(np.prod(shape))
        if n_in != self.weight.shape[1]:
            raise ShapeError(f"linear expects {self.weight.shape[1]} inputs, got {n_in}")
        return (self.weight.shape[0],)

    def forward(self, x):
        self._xshape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return self._x @ self.weight.T + self.bias

    def backward(self, g):
        self.grads = {"weight": g.T @ self._x, "bias": g.sum(axis=0)}
        return (g @ self.weight).reshape(self._xshape)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return float(loss), g / n


class FloatModel:
    """A plain sequential float network."""

    def __init__(self, layers, input_shape, n_classes):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.n_classes,):
            raise ShapeError(f"network output shape {shape} != ({self.n_classes},)")

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input (N, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def param_layers(self):
        return [layer for layer in self.layers if layer.params()]

    def predict(self, x, batch_size=1000) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def copy(self) -> "FloatModel":
        return copy.deepcopy(self)


def toy_model(weight=2.0, bias=0.0) -> FloatModel:
    """1x1x1 input -> 1x1 conv -> square -> identity linear (one class)."""
    return FloatModel(
        [
            Conv2d(np.full((1, 1, 1, 1), weight), np.array([bias])),
            Square(),
            Linear(np.eye(1), np.zeros(1)),
        ],
        input_shape=(1, 1, 1),
        n_classes=1,
    )


def mnist_cryptonets(rng, channels: int = 5, hidden: int = 100) -> FloatModel:
    """CryptoNets-style MNIST net: 5x5/2 conv, square, two FC layers."""
    conv = Conv2d.init(rng, 1, channels, 5, stride=2, padding=1)
    n_flat = 13 * 13 * channels
    return FloatModel(
        [conv, Square(), Linear.init(rng, n_flat, hidden), Linear.init(rng, hidden, 10)],
        input_shape=(28, 28, 1),
        n_classes=10,
    )


def cifar_net(rng, filters=(32, 64, 128), hidden: int = 256) -> FloatModel:
    """Three conv blocks (3x3 conv, square, 2x2 avg-pool) and two FC layers."""
    layers = []
    c, d = 3, 32
    for f in filters:
        layers += [Conv2d.init(rng, c, f, 3, stride=1, padding=1), Square(), AvgPool2d(2)]
        c, d = f, d // 2
    layers += [Linear.init(rng, d * d * c, hidden), Linear.init(rng, hidden, 10)]
    return FloatModel(layers, input_shape=(32, 32, 3), n_classes=10)


def build_arch(name: str, rng, input_shape=None, n_classes=None) -> FloatModel:
    if name == "mnist":
        return mnist_cryptonets(rng)
    if name == "cifar10":
        return cifar_net(rng)
    if name == "small":
        # generic small net for arbitrary image folders
        h, w, c = input_shape
        conv = Conv2d.init(rng, c, 8, 3, stride=1, padding=1)
        return FloatModel(
            [conv, Square(), AvgPool2d(2), Linear.init(rng, (h // 2) * (w // 2) * 8, 64), Linear.init(rng, 64, n_classes)],
            input_shape=input_shape,
            n_classes=n_classes,
        )
    raise ValueError(f"unknown architecture {name!r}")
