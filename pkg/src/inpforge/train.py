"""Training loop over normal samples."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .errors import NumericError, StepRejected
from .inp import INPFormer, coherence_loss
from .losses import soft_mining_loss, total_loss
from .optim import OptimizerState, stable_adamw_step
from .tensor import Tensor

log = logging.getLogger(__name__)


class LossRecord(NamedTuple):
    epoch: int
    l_sm: float
    l_c: float
    l_total: float


@dataclass
class TrainState:
    opt: OptimizerState
    epoch: int = 0
    history: list[LossRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, cfg) -> "TrainState":
        return cls(OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay, clip_threshold=cfg.clip_threshold))


@dataclass
class FeatureCache:
    """Frozen-encoder outputs for a fixed image list, as stacked arrays."""

    layers: np.ndarray  # (L, B, N, C)
    groups: np.ndarray  # (G, B, N, C)
    fused: np.ndarray  # (B, N, C)

    def __len__(self) -> int:
        return self.fused.shape[0]

    def batch(self, idx) -> EncoderOutput:
        wrap = Tensor._wrap
        return EncoderOutput(
            [wrap(x[idx]) for x in self.layers],
            [wrap(g[idx]) for g in self.groups],
            wrap(self.fused[idx]),
        )


def encode_images(model: INPFormer, images: np.ndarray, chunk: int = 32) -> FeatureCache:
    parts = []
    for start in range(0, len(images), chunk):
        out = model.encode(images[start : start + chunk])
        parts.append(out)
    return FeatureCache(
        np.stack([np.concatenate([p.layer_features[i].data for p in parts]) for i in range(len(parts[0].layer_features))]),
        np.stack([np.concatenate([p.groups[i].data for p in parts]) for i in range(len(parts[0].groups))]),
        np.concatenate([p.fused.data for p in parts]),
    )


def losses(model: INPFormer, enc: EncoderOutput):
    """Forward pass and (L_sm, L_c or None, L_total)."""
    cfg = model.cfg
    fwd = model.forward(enc)
    enc_side, dec_side = model.supervised_pairs(enc, fwd)
    l_sm = soft_mining_loss(enc_side, dec_side, cfg.gamma)
    l_c = None
    if cfg.use_inp:
        if cfg.lam > 0:
            l_c, _ = coherence_loss(enc.fused, fwd.inps.prototypes, cfg.grid)
        else:
            with T.no_grad():
                l_c, _ = coherence_loss(enc.fused, fwd.inps.prototypes.detach(), cfg.grid)
    return l_sm, l_c, total_loss(l_sm, l_c, cfg.lam)


def train_step(model: INPFormer, enc: EncoderOutput, state: TrainState) -> tuple[float, float, float]:
    params = model.params
    l_sm, l_c, total = losses(model, enc)
    params.zero_grad()
    total.backward()
    grads = {name: p.grad for name, p in params.items()}
    stable_adamw_step(dict(params.items()), grads, state.opt)
    lc = float("nan") if l_c is None else l_c.item()
    return l_sm.item(), lc, total.item()


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle for one epoch, derived from (seed, epoch) alone so resumes match."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, epoch))).permutation(n)


def train(
    model: INPFormer,
    train_images: np.ndarray | FeatureCache,
    epochs: int | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[LossRecord], None] | None = None,
) -> tuple[INPFormer, list[LossRecord], TrainState]:
    """Train until ``epochs`` (default ``cfg.epochs``) total epochs are done.

    ``state`` resumes a previous run; epochs already completed are skipped.
    """
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    state = state or TrainState.fresh(cfg)
    cache = train_images if isinstance(train_images, FeatureCache) else encode_images(model, train_images)
    n = len(cache)
    for epoch in range(state.epoch + 1, epochs + 1):
        order = epoch_order(cfg.seed, epoch, n)
        sums = np.zeros(3)
        count = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start : start + cfg.batch_size])
            try:
                vals = train_step(model, cache.batch(idx), state)
            except StepRejected as exc:
                raise StepRejected([f"epoch {epoch} batch {b}: {name}" for name in exc.names]) from exc
            sums += vals
            count += 1
        rec = LossRecord(epoch, *(float(x) for x in sums / count))
        if not math.isfinite(rec.l_sm) or not math.isfinite(rec.l_total):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        state.history.append(rec)
        state.epoch = epoch
        log.info("epoch %d  L_sm=%.5f  L_c=%.5f  L_total=%.5f", *rec)
        if on_epoch:
            on_epoch(rec)
    return model, state.history, state


def history_csv(history: list[LossRecord]) -> str:
    rows = ["epoch,L_sm,L_c,L_total"]
    rows += [f"{r.epoch},{r.l_sm!r},{r.l_c!r},{r.l_total!r}" for r in history]
    return "\n".join(rows) + "\n"
