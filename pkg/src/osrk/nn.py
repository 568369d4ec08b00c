"""Small dense layer engine with hand-written backward passes.

Arrays are float64 numpy arrays in NCHW layout. Every layer caches what
its backward pass needs during ``forward`` and accumulates parameter
gradients into ``Param.grad`` during ``backward``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, NumericalError, ShapeError


class Param:
    __slots__ = ("name", "data", "grad", "trainable")

    def __init__(self, data, name: str = "", trainable: bool = True):
        self.data = np.require(data, dtype=np.float64, requirements="C")
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape})"


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


class Layer:
    kind = "layer"

    def params(self) -> list[Param]:
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray | None:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)


class Conv2d(Layer):
    """Cross-correlation with constant-zero padding (no kernel flip)."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, name="conv"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = Param(np.zeros((out_channels, in_channels, kernel_size, kernel_size)), f"{name}.weight")
        self.bias = Param(np.zeros(out_channels), f"{name}.bias")
        self.needs_input_grad = True
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} input channels, got input shape {in_shape}")
        k, s, p = self.kernel_size, self.stride, self.padding
        if k > h + 2 * p or k > w + 2 * p:
            raise ShapeError(f"kernel {k}x{k} larger than padded input {(h + 2 * p, w + 2 * p)} (input shape {in_shape})")
        return (self.out_channels, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p))

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"conv input must be (B, C, H, W), got shape {x.shape}")
        _, ho, wo = self.output_shape(x.shape[1:])
        b = x.shape[0]
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, -1)
        wmat = self.weight.data.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias.data
        self._cache = (cols, xp.shape, ho, wo)
        return np.ascontiguousarray(out.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2))

    def backward(self, dout):
        cols, xp_shape, ho, wo = self._cache
        b = dout.shape[0]
        d2 = dout.transpose(0, 2, 3, 1).reshape(b * ho * wo, self.out_channels)
        if self.weight.trainable:
            self.weight.grad += (d2.T @ cols).reshape(self.weight.shape)
            self.bias.grad += d2.sum(axis=0)
        if not self.needs_input_grad:
            return None
        k, s, p = self.kernel_size, self.stride, self.padding
        dcols = (d2 @ self.weight.data.reshape(self.out_channels, -1)).reshape(b, ho, wo, self.in_channels, k, k)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, k, k, ho, wo)
        dxp = np.zeros(xp_shape)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return np.ascontiguousarray(dxp)


class MaxPool2d(Layer):
    """Max pooling; ties go to the first maximal element in row-major scan order."""

    kind = "pool"

    def __init__(self, window, stride):
        self.window = window
        self.stride = stride
        self._cache = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if self.window > h or self.window > w:
            raise ShapeError(f"pool window {self.window} exceeds input shape {in_shape}")
        return (c, pool_output_size(h, self.window, self.stride), pool_output_size(w, self.window, self.stride))

    def forward(self, x):
        _, ho, wo = self.output_shape(x.shape[1:])
        k, s = self.window, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(win.shape[:4] + (k * k,))
        arg = np.argmax(flat, axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return out

    def backward(self, dout):
        x_shape, arg = self._cache
        k, s = self.window, self.stride
        ho, wo = arg.shape[2:]
        dx = np.zeros(x_shape)
        for o in range(k * k):
            di, dj = divmod(o, k)
            dx[:, :, di : di + s * ho : s, dj : dj + s * wo : s] += np.where(arg == o, dout, 0.0)
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0.0)  # propagates NaN

    def backward(self, dout):
        return np.where(self._mask, dout, 0.0)


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, out_features, name="dense"):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Param(np.zeros((out_features, in_features)), f"{name}.weight")
        self.bias = Param(np.zeros(out_features), f"{name}.bias")
        self._x = None

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise ShapeError(f"dense layer expects input shape ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"dense layer weight shape {self.weight.shape} incompatible with input shape {x.shape}")
        self._x = x
        return x @ self.weight.data.T + self.bias.data

    def backward(self, dout):
        if self.weight.trainable:
            self.weight.grad += dout.T @ self._x
            self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.data


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(
    fn: Callable[[], float],
    params: Sequence[Param],
    step: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` must evaluate the scalar objective from the current ``Param.data``
    values and leave the analytic gradient in each ``Param.grad`` (zeroing
    it first). With ``max_coords`` only that many randomly chosen
    coordinates per parameter are perturbed.
    """
    if step <= 0:
        raise ArgumentError(f"step must be positive, got {step}")

    def value():
        v = float(fn())
        if not np.isfinite(v):
            raise NumericalError(f"objective is not finite ({v})")
        return v

    value()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            worst = max(worst, float(relative_error(g.reshape(-1)[i], num)))
    value()  # restore grads for the unperturbed point
    return worst
