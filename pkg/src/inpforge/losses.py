"""Soft mining reconstruction loss and the total training objective."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DegenerateInputWarning, NumericError, ShapeError
from .tensor import Tensor

MEAN_EPS = 1e-8


@dataclass
class RegionDistanceField:
    distances: list[np.ndarray]  # per group, (N,) or (B, N)
    batch_means: list[float]
    weights: list[np.ndarray]


def region_cosine_distance(f_enc: Tensor, f_dec: Tensor) -> Tensor:
    """Per-token cosine distance between aligned (…, N, C) feature maps."""
    if f_enc.shape != f_dec.shape:
        raise ShapeError(f"feature shapes differ: {f_enc.shape} vs {f_dec.shape}")
    return T.cosine_distance(f_enc, f_dec)


def soft_mining_weights(mfield, gamma: float) -> np.ndarray:
    """``(M / mean(M)) ** gamma`` with the mean over every location in the batch.

    An all-zero field gives unit weights (0/0 taken as 1) and a warning.
    """
    m = np.asarray(mfield.data if isinstance(mfield, Tensor) else mfield)
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    u = float(m.mean(dtype=np.float64))
    if u <= 0.0:
        warnings.warn("soft_mining_weights: all-zero distance field, weights set to 1",
                      DegenerateInputWarning, stacklevel=2)
        return np.ones_like(m)
    ratio = m / m.dtype.type(max(u, MEAN_EPS))
    return (ratio ** m.dtype.type(gamma)).astype(m.dtype, copy=False)


def _flatten_tokens(x: Tensor) -> Tensor:
    return T.reshape(x, (*x.shape[:-2], x.shape[-2] * x.shape[-1]))


def soft_mining_loss(enc_groups: list[Tensor], dec_groups: list[Tensor], gamma: float,
                     return_field: bool = False):
    """Global-cosine reconstruction loss with per-location gradient weights.

    Every decoder group passes through ``grad_scale`` with weights from
    :func:`soft_mining_weights`, so the forward value does not depend on
    ``gamma``; only the backward pass does. Batched inputs average over images.
    """
    if len(enc_groups) != len(dec_groups):
        raise ShapeError(f"{len(enc_groups)} encoder groups vs {len(dec_groups)} decoder groups")
    terms = []
    field = RegionDistanceField([], [], [])
    for g, (fe, fd) in enumerate(zip(enc_groups, dec_groups)):
        fe = fe.detach()
        flat_e, flat_d = fe.data.reshape(*fe.shape[:-2], -1), fd.data.reshape(*fd.shape[:-2], -1)
        eps = fe.dtype.type(1e-8)
        if (np.linalg.norm(flat_e, axis=-1) < eps).any() or (np.linalg.norm(flat_d, axis=-1) < eps).any():
            raise NumericError(f"soft_mining_loss: zero-norm flattened features in group {g}")
        with T.no_grad():
            dist = region_cosine_distance(fe, fd.detach()).data
        w = soft_mining_weights(dist, gamma)
        field.distances.append(dist)
        field.batch_means.append(float(dist.mean(dtype=np.float64)))
        field.weights.append(w)
        fhat = T.grad_scale(fd, w[..., None])
        terms.append(T.mean(T.cosine_distance(_flatten_tokens(fe), _flatten_tokens(fhat))))
    loss = terms[0]
    for t in terms[1:]:
        loss = T.add(loss, t)
    loss = T.scale(loss, 1.0 / len(terms))
    return (loss, field) if return_field else loss


def total_loss(l_sm: Tensor, l_c: Tensor | None, lam: float) -> Tensor:
    if lam == 0 or l_c is None:
        return l_sm
    return T.add(l_sm, T.scale(l_c, lam))
