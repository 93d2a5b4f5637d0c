"""Layer kernels with explicit forward/backward passes.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients in place during ``backward``.  Parameter
arrays may be views into larger arrays (slimmable sub-networks rely on this),
so all gradient updates use in-place ``+=``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when a layer receives an input it cannot process."""


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    momentum_buffer: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)
        if not (self.value.shape == self.grad.shape == self.momentum_buffer.shape):
            raise ShapeError(
                f"parameter buffers disagree: value {self.value.shape}, "
                f"grad {self.grad.shape}, momentum {self.momentum_buffer.shape}"
            )

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


def _check(cond, layer, expected, actual):
    if not cond:
        raise ShapeError(f"layer '{layer}': expected input {expected}, got {actual}")


class Layer:
    kind = "abstract"
    n_inputs = 1

    def __init__(self, name: str):
        self.name = name
        self._cache = None

    def params(self) -> dict[str, Parameter]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, *xs, training=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def im2col(x, kh, kw, stride, pad):
    """Unfold (N, C, H, W) into a (N*Ho*Wo, C*kh*kw) patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def col2im(dcols, x_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x_shape
    dcols = dcols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return dx


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name, weight, bias=None, stride=1, padding=0):
        super().__init__(name)
        if weight.ndim != 4:
            raise ShapeError(f"layer '{name}': conv weight must be 4-D, got {weight.shape}")
        self.weight = Parameter(weight)
        self.bias = Parameter(bias) if bias is not None else None
        self.stride = stride
        self.padding = padding

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, training=False):
        o, c, kh, kw = self.weight.shape
        _check(x.ndim == 4 and x.shape[1] == c, self.name, f"(N, {c}, H, W)", x.shape)
        cols, ho, wo = im2col(x, kh, kw, self.stride, self.padding)
        out = cols @ self.weight.value.reshape(o, -1).T
        if self.bias is not None:
            out += self.bias.value
        self._cache = (cols, x.shape, ho, wo)
        return out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, x_shape, ho, wo = self._cache
        o, c, kh, kw = self.weight.shape
        g = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        self.weight.grad += (g.T @ cols).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += g.sum(axis=0)
        dcols = g @ self.weight.value.reshape(o, -1)
        return col2im(dcols, x_shape, kh, kw, self.stride, self.padding, ho, wo)


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, weight, bias=None):
        super().__init__(name)
        self.weight = Parameter(weight)
        self.bias = Parameter(bias) if bias is not None else None

    def params(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x, training=False):
        _check(x.ndim == 2 and x.shape[1] == self.weight.shape[1], self.name,
               f"(N, {self.weight.shape[1]})", x.shape)
        self._cache = x
        out = x @ self.weight.value.T
        if self.bias is not None:
            out = out + self.bias.value
        return out

    def backward(self, grad):
        x = self._cache
        self.weight.grad += grad.T @ x
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value


class BatchNorm2d(Layer):
    """Batch normalization over the channel axis of 4-D (or 2-D) inputs.

    Running variance tracks the biased batch variance, the same statistic used
    for normalization in training mode.
    """

    kind = "batchnorm2d"

    def __init__(self, name, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.1):
        super().__init__(name)
        self.gamma = Parameter(gamma)
        self.beta = Parameter(beta)
        self.running_mean = running_mean
        self.running_var = running_var
        self.eps = eps
        self.momentum = momentum

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _axes(self, x):
        c = self.gamma.shape[0]
        _check(x.ndim in (2, 4) and x.shape[1] == c, self.name, f"(N, {c}, ...)", x.shape)
        return (0, 2, 3) if x.ndim == 4 else (0,)

    def _bshape(self, x):
        return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)

    def batch_stats(self, x):
        axes = self._axes(x)
        return x.mean(axis=axes), x.var(axis=axes)

    def forward(self, x, training=False):
        axes = self._axes(x)
        bs = self._bshape(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.running_mean *= 1 - m
            self.running_mean += m * mean
            self.running_var *= 1 - m
            self.running_var += m * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        self._cache = (xhat, inv_std, axes, training)
        return xhat * self.gamma.value.reshape(bs) + self.beta.value.reshape(bs)

    def backward(self, grad):
        xhat, inv_std, axes, training = self._cache
        bs = (1, -1, 1, 1) if grad.ndim == 4 else (1, -1)
        self.gamma.grad += (grad * xhat).sum(axis=axes)
        self.beta.grad += grad.sum(axis=axes)
        gx = grad * self.gamma.value.reshape(bs)
        if not training:
            return gx * inv_std.reshape(bs)
        m = grad.size // grad.shape[1]
        mean_g = gx.sum(axis=axes).reshape(bs) / m
        mean_gx = (gx * xhat).sum(axis=axes).reshape(bs) / m
        return (gx - mean_g - xhat * mean_gx) * inv_std.reshape(bs)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._cache, grad, 0).astype(grad.dtype, copy=False)


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def __init__(self, name, kernel=2, stride=None):
        super().__init__(name)
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, x, training=False):
        _check(x.ndim == 4, self.name, "(N, C, H, W)", x.shape)
        k, s = self.kernel, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        self._cache = (x.shape, idx, ho, wo)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        x_shape, idx, ho, wo = self._cache
        k, s = self.kernel, self.stride
        dx = np.zeros(x_shape, dtype=grad.dtype)
        for p in range(k * k):
            i, j = divmod(p, k)
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(idx == p, grad, 0)
        return dx


class GlobalAvgPool(Layer):
    kind = "avgpool-global"

    def forward(self, x, training=False):
        _check(x.ndim == 4, self.name, "(N, C, H, W)", x.shape)
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self._cache
        return np.broadcast_to(grad[:, :, None, None] / (h * w), self._cache).copy()


class AddSkip(Layer):
    kind = "add-skip"
    n_inputs = 2

    def forward(self, a, b, training=False):
        _check(a.shape == b.shape, self.name, f"matching operands {a.shape}", b.shape)
        return a + b

    def backward(self, grad):
        return grad, grad


class ChannelGate(Layer):
    """Per-channel multiplicative gate; all-ones weights make it an identity."""

    kind = "channel-gate"

    def __init__(self, name, weight):
        super().__init__(name)
        if weight.ndim != 1:
            raise ShapeError(f"layer '{name}': gate weight must be 1-D, got {weight.shape}")
        self.weight = Parameter(weight)

    def params(self):
        return {"weight": self.weight}

    def _bshape(self, x):
        return (1, -1, 1, 1) if x.ndim == 4 else (1, -1)

    def forward(self, x, training=False):
        _check(x.ndim in (2, 4) and x.shape[1] == self.weight.shape[0], self.name,
               f"(N, {self.weight.shape[0]}, ...)", x.shape)
        self._cache = x
        return x * self.weight.value.reshape(self._bshape(x))

    def backward(self, grad):
        x = self._cache
        axes = (0, 2, 3) if x.ndim == 4 else (0,)
        self.weight.grad += (grad * x).sum(axis=axes)
        return grad * self.weight.value.reshape(self._bshape(x))


def layer_forward_backward(layer: Layer, inputs, upstream_grad=None, training=True):
    """Run one layer forward and, if ``upstream_grad`` is given, backward.

    ``inputs`` is a single array or a tuple for multi-input layers.  Returns
    ``(output, input_grad)``; ``input_grad`` is ``None`` without upstream
    gradient and a tuple for multi-input layers.
    """
    if not isinstance(inputs, tuple):
        inputs = (inputs,)
    out = layer.forward(*inputs, training=training)
    if upstream_grad is None:
        return out, None
    if upstream_grad.shape != out.shape:
        raise ShapeError(
            f"layer '{layer.name}': upstream gradient {upstream_grad.shape} "
            f"does not match output {out.shape}"
        )
    return out, layer.backward(upstream_grad)
