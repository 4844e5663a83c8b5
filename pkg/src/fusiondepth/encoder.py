"""Residual downsampling encoder shared (structurally) by both branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor
from .nn import BatchNorm2d, Module, kaiming_uniform

TAGS = ("spatial", "frequency", "fused")


@dataclass
class FeatureMatrix:
    """C×h×w (or B×C×h×w) activation map with its branch of origin."""

    values: Tensor
    tag: str

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown feature tag {self.tag!r}")
        if self.values.ndim not in (3, 4):
            raise ShapeError(f"feature values must be C×h×w or B×C×h×w, got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


class ResidualDownBlock(Module):
    """shortcut(x) + F(x), halving the spatial size.

    F = BN -> ReLU -> conv3x3/2 -> BN -> ReLU -> conv3x3/1, shortcut = conv1x1/2.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.bn1 = BatchNorm2d(c_in)
        self.conv1 = kaiming_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        self.bn2 = BatchNorm2d(c_out)
        self.conv2 = kaiming_uniform(rng, (c_out, c_out, 3, 3), c_out * 9)
        self.shortcut = kaiming_uniform(rng, (c_out, c_in, 1, 1), c_in)

    def __call__(self, x: Tensor) -> Tensor:
        return residual_down_block(x, self)


def residual_down_block(x: Tensor, block: ResidualDownBlock) -> Tensor:
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"residual_down_block needs even spatial dims, got {h}×{w}")
    f = ops.conv2d(ops.relu(block.bn1(x)), block.conv1, stride=2, padding=1)
    f = ops.conv2d(ops.relu(block.bn2(f)), block.conv2, stride=1, padding=1)
    out = ops.conv2d(x, block.shortcut, stride=2) + f
    return out.reshape(out.shape[1:]) if squeeze else out


class Encoder(Module):
    """``blocks`` residual down blocks with channel plan C0 -> ... -> D/2 -> D."""

    def __init__(self, rng: np.random.Generator, in_channels: int, dim: int = 64,
                 blocks: int = 2, tag: str = "spatial"):
        if blocks < 1:
            raise ValueError("encoder needs at least one block")
        widths = [dim // 2 ** (blocks - 1 - i) for i in range(blocks)]
        chans = [in_channels] + widths
        self.blocks = [ResidualDownBlock(rng, chans[i], chans[i + 1]) for i in range(blocks)]
        self.in_channels = in_channels
        self.dim = dim
        self.tag = tag

    @property
    def divisor(self) -> int:
        return 2 ** len(self.blocks) * 4

    def __call__(self, x: Tensor) -> FeatureMatrix:
        return encode(x, self)


def encode(x: Tensor, encoder: Encoder) -> FeatureMatrix:
    h, w = x.shape[-2:]
    d = encoder.divisor
    if h % d or w % d:
        raise ShapeError(f"input {h}×{w} not divisible by {d} (required divisor {d})")
    if x.shape[-3] != encoder.in_channels:
        raise ShapeError(f"encoder expects {encoder.in_channels} input channels, got {x.shape[-3]}")
    for block in encoder.blocks:
        x = block(x)
    return FeatureMatrix(x, encoder.tag)
