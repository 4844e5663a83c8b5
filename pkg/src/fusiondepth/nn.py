"""Parameter containers shared by the encoder, transformer and decoder."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor, get_dtype


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def param(values: np.ndarray) -> Tensor:
    return Tensor(np.asarray(values, dtype=get_dtype()), requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


class Module:
    """Attribute-walking container.

    Trainable tensors are attributes holding a gradient-tracking ``Tensor``;
    non-trainable state lives in ``self.buffers`` as NumPy arrays.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Module, str]]:
        """Yield (qualified name, owning module, local key)."""
        for key in getattr(self, "buffers", {}):
            yield prefix + key, self, key
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: owner.buffers[key] for name, owner, key in self.named_buffers()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, owner, key in self.named_buffers():
            owner.buffers[key] = np.array(arrays[name], dtype=owner.buffers[key].dtype)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class BatchNorm2d(Module):
    """Batch normalisation with running statistics (momentum 0.1)."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))
        self.eps = eps
        self.momentum = momentum
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=get_dtype()),
            "running_var": np.ones(channels, dtype=get_dtype()),
        }

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            x_np = x.data
            m = x_np.shape[0] * x_np.shape[2] * x_np.shape[3]
            mu = x_np.mean(axis=(0, 2, 3))
            var = x_np.var(axis=(0, 2, 3))
            unbiased = var * (m / (m - 1)) if m > 1 else var
            mom = self.momentum
            self.buffers["running_mean"] = (1 - mom) * self.buffers["running_mean"] + mom * mu
            self.buffers["running_var"] = (1 - mom) * self.buffers["running_var"] + mom * unbiased
        return ops.batch_norm(
            x, self.gamma, self.beta, eps=self.eps, training=self.training,
            running_mean=self.buffers["running_mean"], running_var=self.buffers["running_var"],
        )


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = xavier_uniform(rng, d_in, d_out)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)
