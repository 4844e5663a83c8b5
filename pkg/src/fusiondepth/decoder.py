"""Transpose-convolution decoder producing a normalised depth map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor
from .encoder import FeatureMatrix
from .nn import BatchNorm2d, Module, kaiming_uniform, param


@dataclass
class DepthMap:
    """Depth in [0, 1] (1×H×W or B×1×H×W); ``depth_scale`` meters map to 1.0."""

    values: Tensor
    depth_scale: float = 10.0

    def metric(self) -> np.ndarray:
        return self.values.data * self.depth_scale

    def to_png_array(self) -> np.ndarray:
        """16-bit encoding, ``round(depth * 65535)``."""
        return np.round(np.clip(self.values.data, 0.0, 1.0) * 65535).astype(np.uint16)


class UpsampleBlock(Module):
    """transpose_conv2d(2×2, stride 2) -> BN -> ReLU."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.kernel = kaiming_uniform(rng, (c_in, c_out, 2, 2), c_in)
        self.bn = BatchNorm2d(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return upsample_block(x, self)


def upsample_block(x: Tensor, block: UpsampleBlock) -> Tensor:
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.shape[1] != block.kernel.shape[0]:
        raise ShapeError(f"upsample block expects {block.kernel.shape[0]} channels, got {x.shape[1]}")
    y = ops.relu(block.bn(ops.transpose_conv2d(x, block.kernel, stride=2)))
    return y.reshape(y.shape[1:]) if squeeze else y


class Decoder(Module):
    """``blocks`` upsample blocks (D -> D/2 -> ...) then a 3×3 refinement conv and sigmoid."""

    def __init__(self, rng: np.random.Generator, dim: int = 64, blocks: int = 2):
        chans = [dim // 2 ** i for i in range(blocks + 1)]
        self.blocks = [UpsampleBlock(rng, chans[i], chans[i + 1]) for i in range(blocks)]
        self.refine = kaiming_uniform(rng, (1, chans[-1], 3, 3), chans[-1] * 9)
        self.refine_bias = param(np.zeros(1))

    def __call__(self, f: FeatureMatrix, out_hw: tuple[int, int] | None = None,
                 depth_scale: float = 10.0) -> DepthMap:
        return decode(f, self, out_hw, depth_scale)


def decode(f: FeatureMatrix, dec: Decoder, out_hw: tuple[int, int] | None = None,
           depth_scale: float = 10.0) -> DepthMap:
    if f.tag != "fused":
        raise ValueError(f"decoder expects fused features, got {f.tag!r}")
    factor = 2 ** len(dec.blocks)
    if out_hw is not None and (f.height * factor, f.width * factor) != tuple(out_hw):
        raise ShapeError(
            f"decoding {f.height}×{f.width} by {factor} gives "
            f"{f.height * factor}×{f.width * factor}, expected {out_hw[0]}×{out_hw[1]}"
        )
    x = f.values
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    for block in dec.blocks:
        x = block(x)
    logits = ops.conv2d(x, dec.refine, stride=1, padding=1) + dec.refine_bias.reshape(1, 1, 1, 1)
    depth = ops.sigmoid(logits)
    return DepthMap(depth.reshape(depth.shape[1:]) if squeeze else depth, depth_scale)
