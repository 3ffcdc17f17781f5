"""Layers with explicit forward/backward passes.

Activations are NCHW for spatial layers and ``(N, D)`` for vector layers.
Every layer caches what its backward pass needs during ``forward``; calling
``backward`` without a preceding ``forward`` raises :class:`StateError`.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Layer:
    """Base class.  ``params`` and ``grads`` share keys."""

    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind} layer {self.name!r}: backward without forward")
        cache, self._cache = self._cache, None
        return cache

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r})"


def _windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k) view
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


class Conv2d(Layer):
    """Cross-correlation with bias.  Weights are ``(out, in, k, k)``."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel, stride=1, pad=0, name="",
                 rng=None, dtype=np.float64):
        super().__init__(name)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.pad = kernel, stride, pad
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = in_channels * kernel * kernel
        self.params["W"] = (rng.standard_normal((out_channels, in_channels, kernel, kernel))
                            * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)

    def output_shape(self, h, w):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"{self.name}: expected (N, {self.in_channels}, H, W), got {x.shape}")
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        if xp.shape[2] < self.kernel or xp.shape[3] < self.kernel:
            raise ShapeError(f"{self.name}: input {x.shape} smaller than kernel {self.kernel}")
        win = _windows(xp, self.kernel, self.stride)
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        W = self.params["W"]
        out = cols @ W.reshape(W.shape[0], -1).T + self.params["b"]
        self._cache = (xp.shape, cols, ho, wo)
        return out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, grad):
        xp_shape, cols, ho, wo = self._take_cache()
        W = self.params["W"]
        n = grad.shape[0]
        g = grad.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
        self.grads["W"] = (g.T @ cols).reshape(W.shape)
        self.grads["b"] = g.sum(axis=0)
        dcols = (g @ W.reshape(W.shape[0], -1)).reshape(n, ho, wo, self.in_channels,
                                                        self.kernel, self.kernel)
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        s = self.stride
        for i in range(self.kernel):
            for j in range(self.kernel):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        p = self.pad
        return dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return grad * self._take_cache()


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel, stride, name=""):
        super().__init__(name)
        self.kernel, self.stride = kernel, stride

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise ShapeError(f"{self.name}: bad input shape {x.shape} for pool {self.kernel}")
        win = _windows(x, self.kernel, self.stride)
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, -1)
        arg = flat.argmax(axis=-1)
        self._cache = (x.shape, arg, ho, wo)
        return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        shape, arg, ho, wo = self._take_cache()
        dx = np.zeros(shape, dtype=grad.dtype)
        k, s = self.kernel, self.stride
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += grad * hit
        return dx


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._take_cache())


class Linear(Layer):
    """``y = x W + b`` with ``W`` of shape ``(in_dim, out_dim)``."""

    kind = "fc"

    def __init__(self, in_dim, out_dim, name="", rng=None, dtype=np.float64):
        super().__init__(name)
        self.in_dim, self.out_dim = in_dim, out_dim
        rng = np.random.default_rng(0) if rng is None else rng
        self.params["W"] = (rng.standard_normal((in_dim, out_dim))
                            * np.sqrt(2.0 / in_dim)).astype(dtype)
        self.params["b"] = np.zeros(out_dim, dtype=dtype)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected (N, {self.in_dim}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._take_cache()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` in training."""

    kind = "dropout"

    def __init__(self, rate=0.5, name="", rng=None):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(0) if rng is None else rng

    def forward(self, x, train=False):
        if not train or self.rate == 0:
            self._cache = np.ones((), dtype=x.dtype)
            return x
        mask = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / (1 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._take_cache()


class AvgPool1d(Layer):
    kind = "avgpool1d"

    def __init__(self, kernel=2, stride=2, name=""):
        super().__init__(name)
        self.kernel, self.stride = kernel, stride

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] < self.kernel:
            raise ShapeError(f"{self.name}: bad input shape {x.shape} for pool {self.kernel}")
        win = sliding_window_view(x, self.kernel, axis=1)[:, ::self.stride]
        self._cache = (x.shape, win.shape[1])
        return win.mean(axis=-1)

    def backward(self, grad):
        shape, lo = self._take_cache()
        dx = np.zeros(shape, dtype=grad.dtype)
        k, s = self.kernel, self.stride
        for i in range(k):
            dx[:, i:i + s * lo:s] += grad / k
        return dx


class DepthConcat(Layer):
    """Joins a list of ``(N, D_i)`` inputs along the feature axis."""

    kind = "depth_concat"

    def forward(self, xs, train=False):
        if len({x.shape[0] for x in xs}) != 1:
            raise ShapeError(f"{self.name}: batch sizes differ: {[x.shape for x in xs]}")
        self._cache = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        sizes = self._take_cache()
        return np.split(grad, np.cumsum(sizes)[:-1], axis=1)


class SoftmaxCrossEntropy(Layer):
    """Softmax forward; ``loss`` gives mean cross-entropy, ``backward`` its gradient."""

    kind = "softmax_xent"

    def forward(self, x, train=False):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        self._probs = p
        return p

    def loss(self, labels) -> float:
        p = self._probs
        labels = np.asarray(labels)
        if labels.shape != (p.shape[0],):
            raise ShapeError(f"labels shape {labels.shape} does not match batch {p.shape[0]}")
        self._cache = (p, labels)
        return float(-np.mean(np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-300))))

    def backward(self, grad=1.0):
        p, labels = self._take_cache()
        g = p.copy()
        g[np.arange(len(labels)), labels] -= 1
        return g * (grad / len(labels))
