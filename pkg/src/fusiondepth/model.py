"""Two-branch depth network: encoders, patch transformers, fusion, decoder."""

from __future__ import annotations

from .autograd import Tensor
from .config import TrainConfig
from .decoder import Decoder, DepthMap
from .encoder import Encoder
from .fusion import fuse
from .nn import Module, make_rng
from .transformer import PatchTransformer


class DepthEstimator(Module):
    """RGB + spectrum -> depth.

    Each branch runs its own encoder and patch transformer (weights untied);
    the frequency features then attend over the spatial ones and the fused
    map is decoded back to the input resolution.
    """

    def __init__(self, image_size: int = 64, dim: int = 64, encoder_blocks: int = 2,
                 heads: int = 4, transformer_blocks: int = 2, seed: int = 0,
                 fusion_scaled: bool = False, depth_scale: float = 10.0):
        rng = make_rng(seed)
        self.image_size = image_size
        self.fusion_scaled = fusion_scaled
        self.depth_scale = depth_scale
        self.spatial_encoder = Encoder(rng, 3, dim, encoder_blocks, "spatial")
        self.frequency_encoder = Encoder(rng, 2, dim, encoder_blocks, "frequency")
        side = image_size // 2 ** encoder_blocks
        feature_shape = (dim, side, side)
        self.spatial_transformer = PatchTransformer(rng, feature_shape, dim, heads, transformer_blocks)
        self.frequency_transformer = PatchTransformer(rng, feature_shape, dim, heads, transformer_blocks)
        self.decoder = Decoder(rng, dim, encoder_blocks)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "DepthEstimator":
        return cls(cfg.image_size, cfg.embed_dim, cfg.encoder_blocks, cfg.heads,
                   cfg.transformer_blocks, cfg.seed, cfg.fusion_scaled, cfg.depth_scale)

    def __call__(self, image: Tensor, freq: Tensor) -> DepthMap:
        f_orig = self.spatial_transformer(self.spatial_encoder(image))
        f_freq = self.frequency_transformer(self.frequency_encoder(freq))
        fused = fuse(f_freq, f_orig, scaled=self.fusion_scaled)
        return self.decoder(fused, image.shape[-2:], self.depth_scale)
