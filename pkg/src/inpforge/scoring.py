"""Anomaly maps, image scores and zero-shot prototype distance maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .inp import coherence_loss, extract_inps
from .losses import region_cosine_distance


@dataclass
class ScoredSample:
    id: str
    label: int
    pixel_map: np.ndarray  # (H, W)
    image_score: float
    gt_mask: np.ndarray | None = None
    class_id: int | None = None


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights (n_out, n_in)."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample_bilinear(grid_map: np.ndarray, size: int) -> np.ndarray:
    """(…, h, w) -> (…, size, size) bilinear resize."""
    h, w = grid_map.shape[-2:]
    rows = _interp_matrix(size, h)
    cols = _interp_matrix(size, w)
    return rows @ np.asarray(grid_map, dtype=np.float64) @ cols.T


def smooth(maps: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return maps
    if maps.ndim == 2:
        return gaussian_filter(maps, sigma)
    return np.stack([gaussian_filter(m, sigma) for m in maps])


def distances_to_map(dist: np.ndarray, cfg: ModelConfig, smooth_map: bool = True) -> np.ndarray:
    """Token distances (…, N) -> pixel map (…, H, W)."""
    g = cfg.grid
    grid_map = np.asarray(dist, dtype=np.float64).reshape(*np.shape(dist)[:-1], g, g)
    up = upsample_bilinear(grid_map, cfg.image_size)
    return smooth(up, cfg.smoothing_sigma) if smooth_map else up


def anomaly_map(enc_groups, dec_groups, cfg: ModelConfig, smooth_map: bool = True) -> np.ndarray:
    """Group-averaged regional cosine distance, upsampled and Gaussian-smoothed."""
    with T.no_grad():
        per_group = [region_cosine_distance(e.detach(), d.detach()).data.astype(np.float64)
                     for e, d in zip(enc_groups, dec_groups)]
    return distances_to_map(np.mean(per_group, axis=0), cfg, smooth_map)


def image_score(pixel_map, top_fraction: float = 0.01) -> float:
    """Mean of the largest ``max(1, floor(top_fraction * pixels))`` values."""
    flat = np.asarray(pixel_map, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ContractError("image_score: empty map")
    if not 0 < top_fraction <= 1:
        raise ContractError("image_score: top_fraction must lie in (0, 1]")
    count = max(1, int(math.floor(top_fraction * flat.size)))
    top = np.partition(flat, flat.size - count)[flat.size - count :]
    return math.fsum(top.tolist()) / count


def zero_shot_distance_map(images, model, smooth_map: bool = True) -> np.ndarray:
    """Nearest-prototype distance per patch, as a pixel map; the decoder is unused."""
    with T.no_grad():
        enc = model.encode(images)
        inps = extract_inps(enc.fused, model.params["inp.tokens"], model.params)
        _, dmap = coherence_loss(enc.fused, inps.prototypes, model.cfg.grid)
    return distances_to_map(dmap.d.data, model.cfg, smooth_map)
