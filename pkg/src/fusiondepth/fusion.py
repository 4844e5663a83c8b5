"""Attention fusion of the frequency and spatial feature matrices."""

from __future__ import annotations

import math

from . import ops
from .autograd import ShapeError, Tensor
from .encoder import FeatureMatrix


def _tokens(f: FeatureMatrix) -> Tensor:
    """B×C×h×w -> B×(h·w)×C, positions in row-major order."""
    x = f.values
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


def fusion_weights(f_freq: FeatureMatrix, f_orig: FeatureMatrix, scaled: bool = False) -> Tensor:
    """A = softmax(F_freq F_orig^T), softmax over spatial-source positions."""
    q, k = _tokens(f_freq), _tokens(f_orig)
    sim = ops.matmul(q, k.T)
    if scaled:
        sim = sim / math.sqrt(q.shape[-1])
    return ops.softmax(sim, axis=-1)


def fuse(f_freq: FeatureMatrix, f_orig: FeatureMatrix, scaled: bool = False) -> FeatureMatrix:
    """F_fused = A F_orig, reshaped back to C×h×w and tagged ``fused``.

    ``scaled`` divides the similarities by sqrt(C); off by default.
    """
    if f_freq.tag != "frequency" or f_orig.tag != "spatial":
        raise ValueError(f"fuse expects (frequency, spatial) features, got ({f_freq.tag}, {f_orig.tag})")
    if f_freq.values.shape != f_orig.values.shape:
        raise ShapeError(f"fusion inputs differ in shape: {f_freq.values.shape} vs {f_orig.values.shape}")
    squeeze = f_orig.values.ndim == 3
    if squeeze:
        f_freq = FeatureMatrix(f_freq.values.reshape((1,) + f_freq.values.shape), f_freq.tag)
        f_orig = FeatureMatrix(f_orig.values.reshape((1,) + f_orig.values.shape), f_orig.tag)
    b, c, h, w = f_orig.values.shape
    a = fusion_weights(f_freq, f_orig, scaled)
    fused = ops.matmul(a, _tokens(f_orig)).transpose(0, 2, 1).reshape(b, c, h, w)
    return FeatureMatrix(fused.reshape(c, h, w) if squeeze else fused, "fused")
