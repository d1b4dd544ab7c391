"""Intrinsic-normal-prototype extractor, coherence loss, bottleneck and decoder.

The trainable half of the model. Encoder features enter as constants; the
extractor turns them into ``M`` per-image prototypes, and the decoder may
read the image only through ReLU attention onto those prototypes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .encoder import EncoderOutput, fuse, group_sums
from .errors import ConfigError
from .tensor import Tensor

# Seed tokens start large enough that the extractor's softmax is not uniform;
# near-zero tokens make all M prototypes collapse onto the image mean.
TOKEN_INIT_STD = 1.0


@dataclass
class INPSet:
    seed_tokens: Tensor  # (M, C), shared across images
    prototypes: Tensor  # (M, C) or (B, M, C), recomputed per image
    attention_over_patches: Tensor  # (M, N) or (B, M, N)


@dataclass
class DistanceMap:
    d: Tensor  # (N,) or (B, N)
    grid: int

    @property
    def spatial(self) -> np.ndarray:
        return self.d.data.reshape(*self.d.shape[:-1], self.grid, self.grid)


@dataclass
class ForwardResult:
    inps: INPSet | None
    fused_bottleneck: Tensor
    layer_outputs: list[Tensor]
    decoder_groups: list[Tensor]


def init_params(cfg: ModelConfig, seed: int | None = None) -> nn.ParamStore:
    """Trainable parameters: seed tokens, extractor, bottleneck and decoder."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    c = cfg.embed_dim
    p = nn.ParamStore(trainable=True)
    nn.init_ffn(p.scope("bottleneck.ffn"), rng, c, 4 * c)
    nn.init_ln(p.scope("bottleneck.ln"), c)
    if cfg.use_inp:
        p.add("inp.tokens", rng.standard_normal((cfg.num_inps, c)) * TOKEN_INIT_STD)
        p.add("extractor.wq", nn.xavier(rng, c, c))
        p.add("extractor.wk", nn.xavier(rng, c, c))
        # prototypes start inside the patch-feature space
        p.add("extractor.wv", np.eye(c) + nn.xavier(rng, c, c, gain=0.1))
        nn.init_ln(p.scope("extractor.ln"), c)
        nn.init_ln(p.scope("extractor.lnk"), c)
        nn.init_ffn(p.scope("extractor.ffn"), rng, c, 4 * c)
        for i in range(cfg.decoder_depth):
            init_decoder_layer(p.scope(f"decoder{i}"), rng, c)
    else:
        for i in range(cfg.decoder_depth):
            nn.init_block(p.scope(f"decoder{i}"), rng, c)
    return p


def init_decoder_layer(scope: nn.Scope, rng, dim: int) -> None:
    s, pre = scope.store, scope.prefix
    nn.init_ln(s.scope(f"{pre}.ln1"), dim)
    nn.init_ln(s.scope(f"{pre}.lnp"), dim)
    # Near-identity projections keep ReLU scores positive at init; random
    # ones frequently leave every query negative against all prototypes.
    for name in ("wq", "wk", "wv"):
        scope.add(name, np.eye(dim) + nn.xavier(rng, dim, dim, gain=0.1))
    nn.init_ln(s.scope(f"{pre}.ln2"), dim)
    nn.init_ffn(s.scope(f"{pre}.ffn"), rng, dim, 4 * dim)


def extract_inps(fused: Tensor, tokens: Tensor, p: nn.ParamStore) -> INPSet:
    """Cross-attend the seed tokens (queries) onto the patch features.

    ``T' = softmax(Q K^T / sqrt(C)) V + T`` and ``P = FFN(ln(T')) + T'``.
    """
    c = fused.shape[-1]
    m, n = tokens.shape[0], fused.shape[-2]
    if m > n:
        warnings.warn(f"{m} prototypes for only {n} patches", stacklevel=2)
    q = T.matmul(tokens, p["extractor.wq"])
    # Keys see normalized features so attention follows direction, not norm;
    # otherwise high-norm anomalous patches pull prototypes toward themselves.
    k = T.matmul(nn.ln(fused, p.scope("extractor.lnk")), p["extractor.wk"])
    v = T.matmul(fused, p["extractor.wv"])
    attn = T.softmax_rows(T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(c)))
    t_prime = T.add(T.matmul(attn, v), tokens)
    protos = T.add(nn.ffn(nn.ln(t_prime, p.scope("extractor.ln")), p.scope("extractor.ffn")), t_prime)
    return INPSet(tokens, protos, attn)


def token_prototype_distances(fused: Tensor, protos: Tensor) -> Tensor:
    """(…, N, M) cosine distance of every patch feature to every prototype."""
    return T.cosine_distance(T.reshape(fused, (*fused.shape[:-1], 1, fused.shape[-1])),
                             T.reshape(protos, (*protos.shape[:-2], 1, *protos.shape[-2:])))


def coherence_loss(fused: Tensor, protos: Tensor, grid: int | None = None) -> tuple[Tensor, DistanceMap]:
    """Mean over patches of the distance to the nearest prototype.

    Batched inputs average over images too. Only the winning prototype of each
    patch receives gradient (lowest index on ties).
    """
    dist = token_prototype_distances(fused, protos)
    d, _ = T.min_axis(dist, axis=-1)
    n = fused.shape[-2]
    grid = grid or int(round(math.sqrt(n)))
    return T.mean(d), DistanceMap(d, grid)


def bottleneck(groups: list[Tensor], p: nn.ParamStore, skip: bool = False) -> Tensor:
    """Sum the feature groups and pass them through one FFN."""
    x = fuse(groups)
    out = nn.ffn(nn.ln(x, p.scope("bottleneck.ln")), p.scope("bottleneck.ffn"))
    return T.add(out, x) if skip else out


def inp_guided_attention(f: Tensor, protos: Tensor, layer: nn.Scope, scaled: bool = True,
                         return_attention: bool = False):
    """ReLU attention with the prototypes as the only keys and values; no softmax."""
    q = T.matmul(f, layer["wq"])
    k = T.matmul(protos, layer["wk"])
    v = T.matmul(protos, layer["wv"])
    scores = T.matmul(q, T.transpose(k))
    if scaled:
        scores = T.scale(scores, 1.0 / math.sqrt(f.shape[-1]))
    attn = T.relu(scores)
    out = T.matmul(attn, v)
    return (out, attn) if return_attention else out


def decoder_layer(f_prev: Tensor, protos: Tensor, layer: nn.Scope, scaled: bool = True,
                  return_attention: bool = False):
    """``f' = attn(ln(f_prev), ln(P))``; ``f = FFN(ln(f')) + f'``.

    There is deliberately no residual from ``f_prev`` around the attention.
    Normalizing the prototypes keeps ``f'`` on the same scale as the FFN
    branch; raw prototypes are large enough to drown it out.
    """
    s, pre = layer.store, layer.prefix
    kv = nn.ln(protos, s.scope(f"{pre}.lnp"))
    f1, attn = inp_guided_attention(nn.ln(f_prev, s.scope(f"{pre}.ln1")), kv, layer, scaled, True)
    out = T.add(nn.ffn(nn.ln(f1, s.scope(f"{pre}.ln2")), s.scope(f"{pre}.ffn")), f1)
    return (out, attn) if return_attention else out


def decode(f_b: Tensor, protos: Tensor | None, p: nn.ParamStore, cfg: ModelConfig,
           attention_log: list | None = None) -> tuple[list[Tensor], list[Tensor]]:
    if len(cfg.decoder_group_ranges) != len(cfg.encoder_group_ranges):
        raise ConfigError("decoder and encoder group counts differ")
    x = f_b
    outs = []
    for i in range(cfg.decoder_depth):
        if cfg.use_inp:
            x, attn = decoder_layer(x, protos, p.scope(f"decoder{i}"), cfg.attention_scale, True)
            if attention_log is not None:
                attention_log.append(attn)
        else:
            x = nn.transformer_block(x, p.scope(f"decoder{i}"), cfg.heads)
        outs.append(x)
    return outs, group_sums(outs, cfg.decoder_group_ranges)


class INPFormer:
    """Frozen encoder plus trainable extractor/bottleneck/decoder."""

    def __init__(self, cfg: ModelConfig, encoder=None, params: nn.ParamStore | None = None):
        from .encoder import ViTEncoder

        self.cfg = cfg
        self.encoder = encoder or ViTEncoder(cfg)
        self.params = params or init_params(cfg)

    def encode(self, images) -> EncoderOutput:
        with T.no_grad():
            return self.encoder.encode(images)

    def forward(self, enc: EncoderOutput, attention_log: list | None = None) -> ForwardResult:
        cfg, p = self.cfg, self.params
        inps = None
        protos = None
        if cfg.use_inp:
            inps = extract_inps(enc.fused, p["inp.tokens"], p)
            protos = inps.prototypes
        f_b = bottleneck(enc.groups, p, cfg.bottleneck_skip)
        outs, groups = decode(f_b, protos, p, cfg, attention_log)
        return ForwardResult(inps, f_b, outs, groups)

    def supervised_pairs(self, enc: EncoderOutput, fwd: ForwardResult) -> tuple[list[Tensor], list[Tensor]]:
        """Aligned (encoder, decoder) feature lists used by the losses and maps."""
        if self.cfg.supervision == "layer":
            pairs = self.cfg.layer_pairs()
            return [enc.layer_features[a] for a, _ in pairs], [fwd.layer_outputs[b] for _, b in pairs]
        return enc.groups, fwd.decoder_groups
