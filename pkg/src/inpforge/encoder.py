"""Frozen seed-deterministic ViT encoder producing per-layer patch tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# Pixel normalization applied by encode() before patch embedding.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

# Scale of the random attention output projections. Full-gain random token
# mixing smears local detail across the image; halving it keeps patch features
# local enough for nearest-neighbour style detection.
ATTN_BRANCH_GAIN = 0.5


@dataclass
class EncoderOutput:
    """Layer outputs, their group sums and the extractor input F_Q.

    Tensors are (N, C) for one image or (B, N, C) for a batch.
    """

    layer_features: list[Tensor]
    groups: list[Tensor]
    fused: Tensor


def sinusoidal_2d(grid: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos encodings, raster token order; half the channels per axis."""
    if dim % 4:
        raise ConfigError("embed_dim must be a multiple of 4 for 2-D positional encodings")
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    parts = []
    for coord in (rows.reshape(-1), cols.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def group_sums(layers: list[Tensor], ranges) -> list[Tensor]:
    """Element-wise sums over inclusive layer ranges, accumulated left to right."""
    out = []
    for a, b in ranges:
        acc = layers[a]
        for i in range(a + 1, b + 1):
            acc = T.add(acc, layers[i])
        out.append(acc)
    return out


def fuse(groups: list[Tensor]) -> Tensor:
    acc = groups[0]
    for g in groups[1:]:
        acc = T.add(acc, g)
    return acc


class ViTEncoder:
    """Pre-norm ViT without class token; weights are orthogonal and frozen."""

    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        self.cfg = cfg
        seed = cfg.seed if seed is None else seed
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        c = cfg.embed_dim
        patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels
        self.params = nn.ParamStore(trainable=False)
        p = self.params
        p.add("embed.w", nn.orthogonal(rng, patch_dim, c, gain=np.sqrt(c / min(c, patch_dim))))
        p.add("embed.b", np.zeros(c))
        self.pos = Tensor(sinusoidal_2d(cfg.grid, c))
        for i in range(cfg.encoder_depth):
            nn.init_block(p.scope(f"block{i}"), rng, c, init=nn.orthogonal)
            p[f"block{i}.attn.wo"].data *= ATTN_BRANCH_GAIN

    def patchify_embed(self, image) -> Tensor:
        """(H, W, ch) or (B, H, W, ch) pixels -> (N, C) or (B, N, C) tokens."""
        img = image if isinstance(image, Tensor) else Tensor(image)
        k = self.cfg.patch_size
        *lead, h, w, ch = img.shape
        if h % k or w % k:
            raise ShapeError(f"image {h}x{w} not divisible by patch size {k}")
        if ch != self.cfg.channels:
            raise ShapeError(f"expected {self.cfg.channels} channels, got {ch}")
        nl = len(lead)
        x = T.reshape(img, (*lead, h // k, k, w // k, k, ch))
        x = T.transpose(x, list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3, nl + 4])
        x = T.reshape(x, (*lead, (h // k) * (w // k), k * k * ch))
        return T.add(nn.linear(x, self.params["embed.w"], self.params["embed.b"]), self.pos)

    def block(self, x: Tensor, i: int) -> Tensor:
        return nn.transformer_block(x, self.params.scope(f"block{i}"), self.cfg.heads)

    def encode(self, image) -> EncoderOutput:
        data = image.data if isinstance(image, Tensor) else np.asarray(image)
        x = self.patchify_embed((data - PIXEL_MEAN) / PIXEL_STD)
        layers = []
        for i in range(self.cfg.encoder_depth):
            x = self.block(x, i)
            layers.append(x)
        groups = group_sums(layers, self.cfg.encoder_group_ranges)
        return EncoderOutput(layers, groups, fuse(groups))
