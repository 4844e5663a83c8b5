"""Patch tokenisation and pre-norm transformer blocks over a 4×4 patch grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor
from .encoder import FeatureMatrix
from .nn import LayerNorm, Linear, Module, param, xavier_uniform

GRID = 4
N_TOKENS = GRID * GRID


@dataclass
class TokenSequence:
    """N×D (or B×N×D) tokens in row-major patch-grid order."""

    tokens: Tensor

    def __post_init__(self):
        if self.tokens.shape[-2] != N_TOKENS:
            raise ShapeError(f"expected {N_TOKENS} tokens, got shape {self.tokens.shape}")

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


def _patch_dims(c: int, h: int, w: int) -> tuple[int, int]:
    if h % GRID or w % GRID:
        raise ShapeError(f"feature {c}×{h}×{w} is not divisible into a {GRID}×{GRID} patch grid")
    return h // GRID, w // GRID


def patchify(f: FeatureMatrix, projection: Tensor, pos_embedding: Tensor) -> TokenSequence:
    """Cut the feature into 16 patches, flatten each (C, ph, pw) cell, project to D."""
    x = f.values
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    b, c, h, w = x.shape
    ph, pw = _patch_dims(c, h, w)
    if projection.shape[0] != c * ph * pw:
        raise ShapeError(f"projection expects patch volume {projection.shape[0]}, got {c * ph * pw}")
    cells = x.reshape(b, c, GRID, ph, GRID, pw).transpose(0, 2, 4, 1, 3, 5)
    flat = cells.reshape(b, N_TOKENS, c * ph * pw)
    tokens = ops.matmul(flat, projection) + pos_embedding
    return TokenSequence(tokens.reshape(tokens.shape[1:]) if squeeze else tokens)


def unpatchify(t: TokenSequence, projection: Tensor, target: tuple[int, int, int],
               tag: str) -> FeatureMatrix:
    """Project tokens back to patch volume and place them on the 4×4 grid."""
    c, h, w = target
    ph, pw = _patch_dims(c, h, w)
    x = t.tokens
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if projection.shape[1] != c * ph * pw:
        raise ShapeError(f"projection yields volume {projection.shape[1]}, target needs {c * ph * pw}")
    b = x.shape[0]
    flat = ops.matmul(x, projection)
    cells = flat.reshape(b, GRID, GRID, c, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    out = cells.reshape(b, c, h, w)
    return FeatureMatrix(out.reshape(out.shape[1:]) if squeeze else out, tag)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V, softmax over keys."""
    return ops.matmul(attention_weights(q, k), _check_v(q, v))


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    if q.shape[-1] != k.shape[-1] or q.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention Q {q.shape} and K {k.shape} disagree")
    return ops.softmax(ops.matmul(q, k.T) / math.sqrt(q.shape[-1]), axis=-1)


def _check_v(q: Tensor, v: Tensor) -> Tensor:
    if v.shape[-2] != q.shape[-2]:
        raise ShapeError(f"attention V {v.shape} has a different token count from Q {q.shape}")
    return v


class MultiHeadAttention(Module):
    """Per-head projections stored column-stacked: head i uses columns i*d_k:(i+1)*d_k."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if heads < 1 or dim % heads:
            raise ValueError(f"heads ({heads}) must divide embedding width ({dim})")
        self.heads = heads
        self.w_q = xavier_uniform(rng, dim, dim)
        self.w_k = xavier_uniform(rng, dim, dim)
        self.w_v = xavier_uniform(rng, dim, dim)
        self.w_o = xavier_uniform(rng, dim, dim)

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads

    def __call__(self, x: Tensor) -> Tensor:
        return multi_head(x, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).transpose(
        *range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2
    )


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    nl = len(lead)
    return x.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, n, h * dk)


def multi_head(x, p: MultiHeadAttention) -> Tensor:
    """concat(head_1..head_h) W^O with head_i = attention(x W_i^Q, x W_i^K, x W_i^V)."""
    tokens = x.tokens if isinstance(x, TokenSequence) else x
    if tokens.shape[-1] != p.w_q.shape[0]:
        raise ShapeError(f"tokens of width {tokens.shape[-1]} do not match projections {p.w_q.shape}")
    q = _split_heads(ops.matmul(tokens, p.w_q), p.heads)
    k = _split_heads(ops.matmul(tokens, p.w_k), p.heads)
    v = _split_heads(ops.matmul(tokens, p.w_v), p.heads)
    return ops.matmul(_merge_heads(attention(q, k, v)), p.w_o)


class TransformerBlock(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, expansion: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(rng, dim, expansion * dim)
        self.ff2 = Linear(rng, expansion * dim, dim)

    def __call__(self, x: TokenSequence) -> TokenSequence:
        return transformer_block(x, self)


def transformer_block(x: TokenSequence, p: TransformerBlock) -> TokenSequence:
    """x' = x + MHA(LN(x)); out = x' + FFN(LN(x'))."""
    h = x.tokens + multi_head(p.norm1(x.tokens), p.attn)
    out = h + p.ff2(ops.relu(p.ff1(p.norm2(h))))
    return TokenSequence(out)


class PatchTransformer(Module):
    """patchify -> transformer blocks -> unpatchify for one branch."""

    def __init__(self, rng: np.random.Generator, feature_shape: tuple[int, int, int],
                 dim: int = 64, heads: int = 4, depth: int = 2):
        c, h, w = feature_shape
        ph, pw = _patch_dims(c, h, w)
        volume = c * ph * pw
        self.feature_shape = feature_shape
        self.proj_in = xavier_uniform(rng, volume, dim)
        self.pos = param(0.02 * rng.standard_normal((N_TOKENS, dim)))
        self.blocks = [TransformerBlock(rng, dim, heads) for _ in range(depth)]
        # small reassembly weights keep the (unscaled) fusion similarities near
        # zero at init; otherwise its softmax starts saturated
        self.proj_out = param(rng.standard_normal((dim, volume)) / math.sqrt(dim * c))

    def __call__(self, f: FeatureMatrix) -> FeatureMatrix:
        seq = patchify(f, self.proj_in, self.pos)
        for block in self.blocks:
            seq = block(seq)
        return unpatchify(seq, self.proj_out, self.feature_shape, f.tag)
