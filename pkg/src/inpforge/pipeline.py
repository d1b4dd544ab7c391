"""Batch inference: samples -> scored samples -> metrics."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import tensor as T
from .inp import INPFormer
from .metrics import MetricsReport, evaluate
from .scoring import ScoredSample, anomaly_map, image_score, zero_shot_distance_map


def worker_count() -> int:
    """Worker cap from ``INPFORGE_THREADS`` (0 or unset = CPU count)."""
    raw = os.environ.get("INPFORGE_THREADS", "0").strip() or "0"
    n = int(raw)
    return n if n > 0 else (os.cpu_count() or 1)


def _chunks(n: int, size: int):
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def predict_maps(model: INPFormer, images: np.ndarray, chunk: int = 16, workers: int | None = None) -> np.ndarray:
    """Anomaly maps (B, H, W) for a stack of images.

    Chunks run on separate tapes and are reassembled in input order, so the
    result does not depend on the worker count.
    """

    def run(sl):
        with T.no_grad():
            enc = model.encode(images[sl])
            fwd = model.forward(enc)
            e, d = model.supervised_pairs(enc, fwd)
            return anomaly_map(e, d, model.cfg)

    parts = _map(run, _chunks(len(images), chunk), workers)
    return np.concatenate(parts)


def zero_shot_maps(model: INPFormer, images: np.ndarray, chunk: int = 16, workers: int | None = None) -> np.ndarray:
    parts = _map(lambda sl: zero_shot_distance_map(images[sl], model), _chunks(len(images), chunk), workers)
    return np.concatenate(parts)


def _map(fn, items, workers):
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def score_samples(model: INPFormer, samples, maps: np.ndarray | None = None) -> list[ScoredSample]:
    if maps is None:
        maps = predict_maps(model, np.stack([s.image for s in samples]))
    top = model.cfg.top_fraction
    return [
        ScoredSample(s.id, s.label, m, image_score(m, top), s.gt_mask if s.label else None, s.class_id)
        for s, m in zip(samples, maps)
    ]


def report(scored: list[ScoredSample], pixel: bool = True) -> MetricsReport:
    scores = [s.image_score for s in scored]
    labels = [s.label for s in scored]
    has_masks = all(s.gt_mask is not None for s in scored if s.label)
    if not (pixel and has_masks):
        return evaluate(scores, labels)
    return evaluate(scores, labels, [s.pixel_map for s in scored], [s.gt_mask for s in scored])


def per_class_reports(scored: list[ScoredSample], pixel: bool = True) -> dict[int, MetricsReport]:
    """One report per class id, for the per-class-mean benchmark convention."""
    classes = sorted({s.class_id for s in scored})
    return {c: report([s for s in scored if s.class_id == c], pixel) for c in classes}


def class_mean(reports: dict[int, MetricsReport], metric: str) -> float | None:
    vals = [getattr(r, metric) for r in reports.values()]
    if not vals or any(v is None for v in vals):
        return None
    return float(np.mean(vals))
