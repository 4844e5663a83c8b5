"""Differentiable primitives used by the depth pipeline."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Function, ShapeError, Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt",
    "sum", "mean", "reshape", "transpose", "swap_last",
    "matmul", "relu", "sigmoid", "softmax",
    "conv2d", "transpose_conv2d", "batch_norm", "layer_norm",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise -----------------------------------------------------------

class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Power(Function):
    name = "power"

    def forward(self, a):
        self.a = a
        return a ** self.options["exponent"]

    def backward(self, g):
        p = self.options["exponent"]
        return (g * p * self.a ** (p - 1),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype, copy=False)

    def backward(self, g):
        # subgradient at exactly 0 is 0
        return (g * self.mask,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def power(a, exponent: float) -> Tensor:
    return Power.apply(a, exponent=float(exponent))


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return Power.apply(a, exponent=0.5)


def relu(x) -> Tensor:
    """Elementwise ``max(0, x)``."""
    return Relu.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


# -- reductions and shape ----------------------------------------------------

class Sum(Function):
    name = "sum"

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(np.sum(a, axis=self.options["axis"], keepdims=self.options["keepdims"]))

    def backward(self, g):
        axis = self.options["axis"]
        if axis is not None and not self.options["keepdims"]:
            axes = (axis,) if isinstance(axis, int) else axis
            g = np.expand_dims(g, tuple(ax % len(self.shape) for ax in axes))
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a):
        self.shape = a.shape
        return a.reshape(self.options["shape"])

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a):
        axes = self.options["axes"]
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, g):
        return (np.ascontiguousarray(np.transpose(g, np.argsort(self.axes))),)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = math.prod(a.shape[ax] for ax in axes)
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=axes)


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return transpose(a, axes)


# -- linear algebra ------------------------------------------------------------

class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dims do not broadcast: {a.shape} @ {b.shape}") from None
    return MatMul.apply(a, b)


class Softmax(Function):
    name = "softmax"

    def forward(self, a):
        axis = self.options["axis"]
        z = np.exp(a - a.max(axis=axis, keepdims=True))
        self.out = z / z.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.options["axis"], keepdims=True)),)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


# -- convolution ----------------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Ho, Wo, kh, kw) strided view of a padded batch."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter(cols: np.ndarray, out_hw: tuple[int, int], stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: cols (B, Ho, Wo, C, kh, kw) -> (B, C, H, W)."""
    b, ho, wo, c, kh, kw = cols.shape
    out = np.zeros((b, c) + out_hw, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += patch
    return out


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, k.shape[2], k.shape[3], stride)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), xp


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, k):
        self.x_shape, self.k = x.shape, k
        out, self.xp = _conv_forward(x, k, self.options["stride"], self.options["padding"])
        return out

    def backward(self, g):
        s, p = self.options["stride"], self.options["padding"]
        k = self.k
        gk = np.tensordot(g, _windows(self.xp, k.shape[2], k.shape[3], s), axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, k, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
        gxp = _scatter(cols, self.xp.shape[2:], s)
        gx = gxp[:, :, p:p + self.x_shape[2], p:p + self.x_shape[3]] if p else gxp
        return np.ascontiguousarray(gx), gk


class TransposeConv2d(Function):
    name = "transpose_conv2d"

    def forward(self, x, k):
        s = self.options["stride"]
        self.x, self.k = x, k
        h, w = x.shape[2:]
        kh, kw = k.shape[2:]
        cols = np.tensordot(x, k, axes=([1], [0]))  # (B, H, W, Cout, kh, kw)
        return _scatter(cols, ((h - 1) * s + kh, (w - 1) * s + kw), s)

    def backward(self, g):
        s = self.options["stride"]
        k = self.k
        win = _windows(g, k.shape[2], k.shape[3], s)  # (B, Cout, H, W, kh, kw)
        gx = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gk = np.tensordot(self.x, win, axes=([0, 2, 3], [0, 2, 3]))
        return np.ascontiguousarray(gx), gk


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected C×H×W or B×C×H×W input, got {x.shape}")
    return x, False


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is C_in×H×W or B×C_in×H×W; ``kernel`` is C_out×C_in×kh×kw.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be C_out×C_in×kh×kw, got {kernel.shape}")
    xb, squeeze = _batched(x)
    if xb.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    hp, wp = xb.shape[2] + 2 * padding, xb.shape[3] + 2 * padding
    if kernel.shape[2] > hp or kernel.shape[3] > wp:
        raise ShapeError(
            f"kernel {kernel.shape[2]}×{kernel.shape[3]} larger than padded input {hp}×{wp}"
        )
    out = Conv2d.apply(xb, kernel, stride=int(stride), padding=int(padding))
    return reshape(out, out.shape[1:]) if squeeze else out


def transpose_conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` with zero padding.

    ``kernel`` is C_in×C_out×kh×kw; output side is ``(H-1)*stride + kh``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be C_in×C_out×kh×kw, got {kernel.shape}")
    xb, squeeze = _batched(x)
    if xb.shape[1] != kernel.shape[0]:
        raise ShapeError(f"transpose_conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    out = TransposeConv2d.apply(xb, kernel, stride=int(stride))
    return reshape(out, out.shape[1:]) if squeeze else out


# -- normalisation ---------------------------------------------------------------

class BatchNorm(Function):
    name = "batch_norm"

    def forward(self, x, gamma, beta):
        eps = self.options["eps"]
        shape = (1, -1, 1, 1)
        if self.options["training"]:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = x.var(axis=(0, 2, 3), keepdims=True)
        else:
            mu = self.options["running_mean"].reshape(shape)
            var = self.options["running_var"].reshape(shape)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mu) * self.inv_std
        self.gamma = gamma.reshape(shape)
        return self.gamma * self.xhat + beta.reshape(shape)

    def backward(self, g):
        axes = (0, 2, 3)
        gbeta = g.sum(axis=axes)
        ggamma = (g * self.xhat).sum(axis=axes)
        gxhat = g * self.gamma
        if self.options["training"]:
            m = g.shape[0] * g.shape[2] * g.shape[3]
            gx = (self.inv_std / m) * (
                m * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - self.xhat * (gxhat * self.xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * self.inv_std
        return gx, ggamma, gbeta


def batch_norm(
    x,
    gamma,
    beta,
    eps: float = 1e-5,
    training: bool = True,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
) -> Tensor:
    """Per-channel normalisation over the B, H, W axes of a B×C×H×W tensor.

    Training mode uses biased batch statistics; eval mode uses the supplied
    running statistics.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects B×C×H×W, got {x.shape}")
    c = x.shape[1]
    if as_tensor(gamma).shape != (c,) or as_tensor(beta).shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    if not training and (running_mean is None or running_var is None):
        raise ValueError("eval-mode batch_norm needs running statistics")
    return BatchNorm.apply(
        x, gamma, beta, eps=float(eps), training=bool(training),
        running_mean=running_mean, running_var=running_var,
    )


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    centred = x - mu
    var = mean(centred * centred, axis=-1, keepdims=True)
    return centred / sqrt(var + eps) * gain + bias
