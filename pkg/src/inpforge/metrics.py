"""Image- and pixel-level ranking metrics.

Thresholds are the distinct score values, taken in descending order; tied
scores therefore always enter or leave a prediction set together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ConfigError, MetricUndefinedError

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def _prepare(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    if not np.isfinite(s).all():
        raise MetricUndefinedError("non-finite scores")
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(positive outranks negative), ties counted 1/2."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both classes")
    ranks = rankdata(s)
    u = float(ranks[y].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _threshold_counts(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) after admitting each distinct score, high to low."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    return tp[last], fp[last]


def average_precision(scores, labels) -> float:
    """``sum_k (R_k - R_{k-1}) P_k`` over descending distinct thresholds."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("AP needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    terms = (recall - np.r_[0.0, recall[:-1]]) * precision
    return math.fsum(terms.tolist())


def f1_max(scores, labels) -> float:
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefinedError("F1 needs at least one positive")
    tp, fp = _threshold_counts(s, y)
    p = tp / (tp + fp)
    r = tp / n_pos
    denom = p + r
    f1 = np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1.0), 0.0)
    return float(f1.max())


def pro_curve(maps, masks) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, PRO) points, one per distinct threshold, starting from (0, 0).

    Regions are 8-connected components of each mask; FPR counts false
    positives over all normal pixels of the set.
    """
    scores, regions, sizes = [], [], [0]
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise ValueError(f"map {amap.shape} vs mask {mask.shape}")
        lab, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
        offset = len(sizes) - 1
        lab = np.where(lab > 0, lab + offset, 0)
        sizes.extend(np.bincount(lab.reshape(-1), minlength=offset + n + 1)[offset + 1 :].tolist())
        scores.append(amap.reshape(-1))
        regions.append(lab.reshape(-1))
    s = np.concatenate(scores)
    reg = np.concatenate(regions)
    n_regions = len(sizes) - 1
    n_normal = int((reg == 0).sum())
    if n_regions == 0:
        raise MetricUndefinedError("AUPRO needs at least one anomalous region")
    if n_normal == 0:
        raise MetricUndefinedError("AUPRO needs normal pixels")
    if not np.isfinite(s).all():
        raise MetricUndefinedError("non-finite scores")
    # index 0 (background) gets weight 0, so no division by its zero size
    weight = np.r_[0.0, 1.0 / (np.asarray(sizes[1:], dtype=np.float64) * n_regions)]
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    r_sorted = reg[order]
    pro_inc = weight[r_sorted]
    fp_count = np.cumsum(r_sorted == 0)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    pro = np.cumsum(pro_inc)[last]
    fpr = fp_count[last] / n_normal
    return np.r_[0.0, fpr], np.r_[0.0, np.minimum(pro, 1.0)]


def integrate_clipped(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoid area under a monotone-x polyline on ``[0, limit]``."""
    keep = x <= limit
    xs, ys = list(x[keep]), list(y[keep])
    nxt = np.nonzero(~keep)[0]
    if nxt.size and xs[-1] < limit:
        j = nxt[0]
        x0, y0, x1, y1 = x[j - 1], y[j - 1], x[j], y[j]
        xs.append(limit)
        ys.append(y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
    xs, ys = np.asarray(xs), np.asarray(ys)
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))


def aupro(maps, masks, fpr_limit: float = 0.3) -> float:
    """Area under PRO vs FPR up to ``fpr_limit``, divided by ``fpr_limit``."""
    if not 0 < fpr_limit <= 1:
        raise ConfigError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(maps, masks)
    return integrate_clipped(fpr, pro, fpr_limit) / fpr_limit


@dataclass
class MetricsReport:
    i_auroc: float
    i_ap: float
    i_f1max: float
    p_auroc: float | None = None
    p_ap: float | None = None
    p_f1max: float | None = None
    aupro: float | None = None
    aupro_fpr_limit: float = 0.3

    METRICS = ("i_auroc", "i_ap", "i_f1max", "p_auroc", "p_ap", "p_f1max", "aupro")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.METRICS}

    def csv(self) -> str:
        vals = ["" if v is None else f"{v:.6f}" for v in self.as_dict().values()]
        return ",".join(self.METRICS) + "\n" + ",".join(vals) + "\n"

    def summary(self) -> str:
        return "  ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in self.as_dict().items())


def evaluate(image_scores, image_labels, maps=None, masks=None, fpr_limit: float = 0.3) -> MetricsReport:
    """Seven-metric report; pixel metrics pool every pixel of every image.

    Pixel metrics are left as ``None`` when ``maps``/``masks`` are missing.
    Normal images may pass ``None`` as mask (treated as all-zero).
    """
    rep = MetricsReport(
        auroc(image_scores, image_labels),
        average_precision(image_scores, image_labels),
        f1_max(image_scores, image_labels),
        aupro_fpr_limit=fpr_limit,
    )
    if maps is None or masks is None:
        return rep
    full = [np.zeros(np.shape(m), dtype=np.uint8) if k is None else np.asarray(k) for m, k in zip(maps, masks)]
    pix = np.concatenate([np.asarray(m, dtype=np.float64).reshape(-1) for m in maps])
    lab = np.concatenate([k.reshape(-1) for k in full]).astype(bool)
    rep.p_auroc = auroc(pix, lab)
    rep.p_ap = average_precision(pix, lab)
    rep.p_f1max = f1_max(pix, lab)
    rep.aupro = aupro(maps, full, fpr_limit)
    return rep


