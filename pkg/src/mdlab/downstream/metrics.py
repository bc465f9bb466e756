"""Image- and pixel-level detection metrics.

All threshold sweeps are exact: every distinct score is a candidate threshold
(``score >= threshold`` predicts positive).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from ..errors import UndefinedMetricError


def _prep(scores, labels, metric):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in size")
    if y.all() or not y.any():
        raise UndefinedMetricError(metric)
    return s, y


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic; ties count one half."""
    s, y = _prep(scores, labels, "AUROC")
    ranks = rankdata(s)  # average ranks, multiples of 1/2
    p = int(y.sum())
    n = y.size - p
    twice_u = round(2 * ranks[y].sum()) - p * (p + 1)
    return twice_u / (2 * p * n)


def _counts(s, y):
    """Cumulative TP/FP at each distinct threshold, highest first."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    return tp[last].astype(np.int64), fp[last].astype(np.int64)


def average_precision(scores, labels) -> float:
    """Sum over thresholds of (recall increment) x precision."""
    s, y = _prep(scores, labels, "AP")
    tp, fp = _counts(s, y)
    p = int(y.sum())
    d_tp = np.diff(np.r_[0, tp])
    return float(np.sum(d_tp * (tp / (tp + fp))) / p)


def f1_max(scores, labels) -> float:
    s, y = _prep(scores, labels, "F1-max")
    tp, fp = _counts(s, y)
    fn = int(y.sum()) - tp
    return float(np.max(2 * tp / (2 * tp + fp + fn)))


def aupro(score_maps, gt_masks, fpr_cap: float = 0.3) -> float:
    """Normalised area under the per-region-overlap curve up to ``fpr_cap``."""
    maps = np.asarray(score_maps, dtype=np.float64)
    gts = np.asarray(gt_masks).astype(bool)
    if not gts.any() or gts.all():
        raise UndefinedMetricError("AUPRO")
    region_ids = np.zeros(gts.shape, dtype=np.int64)
    n_regions = 0
    for i in range(gts.shape[0]):
        lab, k = ndimage.label(gts[i])
        region_ids[i] = np.where(lab > 0, lab + n_regions, 0)
        n_regions += k
    s = maps.ravel()
    rid = region_ids.ravel()
    neg = rid == 0
    order = np.argsort(-s, kind="stable")
    s_sorted, rid_sorted = s[order], rid[order]
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s.size - 1]
    fpr = np.cumsum(rid_sorted == 0)[last] / neg.sum()
    sizes = np.bincount(rid, minlength=n_regions + 1)[1:].astype(np.float64)
    onehot_hits = np.zeros((s.size, n_regions))
    pos = rid_sorted > 0
    onehot_hits[np.nonzero(pos)[0], rid_sorted[pos] - 1] = 1.0
    overlap = np.cumsum(onehot_hits, axis=0)[last] / sizes
    pro = overlap.mean(axis=1)
    fpr = np.r_[0.0, fpr]
    pro = np.r_[0.0, pro]
    keep = fpr <= fpr_cap
    x, v = fpr[keep], pro[keep]
    if x[-1] < fpr_cap:
        j = np.searchsorted(fpr, fpr_cap)
        if j < fpr.size:
            w = (fpr_cap - fpr[j - 1]) / (fpr[j] - fpr[j - 1])
            x = np.r_[x, fpr_cap]
            v = np.r_[v, pro[j - 1] + w * (pro[j] - pro[j - 1])]
    area = float(np.sum(np.diff(x) * (v[1:] + v[:-1]) / 2))
    return area / fpr_cap


@dataclass
class MetricsReport:
    image_auroc: float
    image_ap: float
    image_f1: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1: float
    aupro: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def metrics_report(score_maps, gt_masks) -> MetricsReport:
    """Score maps (N, H, W) in [0, 1] against binary ground-truth masks."""
    maps = np.asarray(score_maps, dtype=np.float64)
    gts = np.asarray(gt_masks).astype(bool)
    img_s = maps.reshape(maps.shape[0], -1).max(axis=1)
    img_y = gts.reshape(gts.shape[0], -1).any(axis=1)
    return MetricsReport(
        image_auroc=auroc(img_s, img_y),
        image_ap=average_precision(img_s, img_y),
        image_f1=f1_max(img_s, img_y),
        pixel_auroc=auroc(maps, gts),
        pixel_ap=average_precision(maps, gts),
        pixel_f1=f1_max(maps, gts),
        aupro=aupro(maps, gts),
    )
