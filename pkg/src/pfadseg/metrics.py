"""Evaluation metrics for anomaly score maps.

Everything here is a rank statistic: every metric is invariant under strictly
monotone transforms of the scores, and every threshold sweep enumerates the
distinct score values actually present. "Predicted positive at threshold t"
always means score >= t.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .exceptions import UndefinedMetricError


@dataclass(frozen=True)
class Instance:
    """One connected region of a ground-truth mask."""

    pixels: np.ndarray  # (size, 2) array of (row, col) coordinates
    size: int


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    pixel_precision: float
    instance_recall: float


def _as_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary (0/1)")
    return m.astype(np.uint8)


def _pool(maps: Sequence, masks: Sequence):
    if len(maps) != len(masks):
        raise ValueError(f"{len(maps)} maps vs {len(masks)} masks")
    if not maps:
        raise ValueError("need at least one map/mask pair")
    scores, labels = [], []
    for i, (mp, mk) in enumerate(zip(maps, masks)):
        mp = np.asarray(mp, dtype=np.float64)
        mk = _as_binary(mk)
        if mp.shape != mk.shape:
            raise ValueError(f"pair {i}: map {mp.shape} vs mask {mk.shape}")
        scores.append(mp.ravel())
        labels.append(mk.ravel())
    return np.concatenate(scores), np.concatenate(labels)


def _sweep(scores: np.ndarray, labels: np.ndarray):
    """Cumulative counts at each distinct threshold, descending.

    Returns (thresholds, true_positives, predicted_positives) where entry k
    describes the predictions made at threshold thresholds[k].
    """
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.int64)
    tp = np.cumsum(y)
    last = np.flatnonzero(np.diff(s))
    idx = np.concatenate([last, [s.size - 1]])
    return s[idx], tp[idx], idx + 1


def image_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC AUC over image scores; tied pairs count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_binary(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"image_auc needs both classes; got {n_pos} positive / {n_neg} negative"
        )
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pixel_ap(maps: Sequence, masks: Sequence) -> float:
    """Average precision over all pixels pooled across images.

    Descending sweep over distinct scores with rectangle summation:
    sum_k (R_k - R_{k-1}) * P_k.
    """
    scores, labels = _pool(maps, masks)
    total_pos = int(labels.sum())
    if total_pos == 0:
        raise UndefinedMetricError("pixel_ap needs at least one positive pixel")
    _, tp, pp = _sweep(scores, labels)
    precision = tp / pp
    recall = tp / total_pos
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))


def pixel_ap_per_image(maps: Sequence, masks: Sequence) -> float:
    """Mean of per-image AP over images that contain positives."""
    values = []
    for mp, mk in zip(maps, masks):
        if _as_binary(mk).sum() > 0:
            values.append(pixel_ap([mp], [mk]))
    if not values:
        raise UndefinedMetricError("no image has a positive pixel")
    return float(np.mean(values))


_EIGHT = np.ones((3, 3), dtype=int)


def connected_components(mask) -> list[Instance]:
    """8-connected components of a binary mask, largest first."""
    m = _as_binary(mask)
    labeled, count = ndimage.label(m, structure=_EIGHT)
    instances = []
    for lab in range(1, count + 1):
        pixels = np.argwhere(labeled == lab)
        instances.append(Instance(pixels=pixels, size=int(pixels.shape[0])))
    instances.sort(key=lambda inst: -inst.size)
    return instances


def _detection_thresholds(maps: Sequence, masks: Sequence) -> np.ndarray:
    """Per instance, the loosest threshold at which it counts as detected.

    An instance is detected at t when strictly more than half of its pixels
    score >= t, i.e. when its (size // 2 + 1)-th largest score is >= t.
    """
    out = []
    for mp, mk in zip(maps, masks):
        mp = np.asarray(mp, dtype=np.float64)
        for inst in connected_components(mk):
            vals = np.sort(mp[inst.pixels[:, 0], inst.pixels[:, 1]])[::-1]
            out.append(vals[inst.size // 2])
    return np.array(out, dtype=np.float64)


def iap_curve(maps: Sequence, masks: Sequence) -> list[CurvePoint]:
    """Pixel precision vs instance recall at every distinct score, descending."""
    scores, labels = _pool(maps, masks)
    det = _detection_thresholds(maps, masks)
    if det.size == 0:
        raise UndefinedMetricError("iap_curve needs at least one ground-truth instance")
    det_sorted = np.sort(det)
    thresholds, tp, pp = _sweep(scores, labels)
    detected = det.size - np.searchsorted(det_sorted, thresholds, side="left")
    points = [
        CurvePoint(float(t), float(tp_k / pp_k), float(d / det.size))
        for t, tp_k, pp_k, d in zip(thresholds, tp, pp, detected)
    ]
    recalls = [p.instance_recall for p in points]
    assert all(a <= b for a, b in zip(recalls, recalls[1:])), "recall must grow as threshold drops"
    return points


def iap(maps: Sequence, masks: Sequence) -> float:
    """Area under pixel precision vs instance recall, by recall steps."""
    total = 0.0
    prev = 0.0
    for point in iap_curve(maps, masks):
        total += (point.instance_recall - prev) * point.pixel_precision
        prev = point.instance_recall
    return float(total)


def iap_at_k(maps: Sequence, masks: Sequence, k: float = 90.0) -> float:
    """Best pixel precision among curve points with instance recall >= k%."""
    if not 0 < k <= 100:
        raise ValueError(f"k must be in (0, 100], got {k}")
    points = iap_curve(maps, masks)
    target = k / 100.0
    qualifying = [p.pixel_precision for p in points if p.instance_recall >= target]
    if not qualifying:
        best = max(p.instance_recall for p in points)
        raise UndefinedMetricError(
            f"instance recall never reaches {k}%; max achieved recall = {best:.6f}"
        )
    return float(max(qualifying))


def pro_score(maps: Sequence, masks: Sequence, fpr_limit: float = 0.3) -> float:
    """Per-region overlap averaged over regions, integrated over FPR.

    Sweeps the distinct scores descending, keeps the measured (FPR, PRO)
    points with FPR <= fpr_limit plus one linearly interpolated point at the
    limit, integrates by trapezoid, and normalizes by fpr_limit. If no
    measured point falls inside the limit the score is 0.
    """
    if not 0 < fpr_limit <= 1:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    scores, labels = _pool(maps, masks)
    n_neg = int((labels == 0).sum())
    n_pos = int(labels.sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"pro_score needs both classes of pixels; got {n_pos} positive / {n_neg} negative"
        )

    regions = []
    for mp, mk in zip(maps, masks):
        mp = np.asarray(mp, dtype=np.float64)
        for inst in connected_components(mk):
            regions.append(np.sort(mp[inst.pixels[:, 0], inst.pixels[:, 1]]))

    thresholds, tp, pp = _sweep(scores, labels)
    fpr = (pp - tp) / n_neg
    overlap = np.zeros(thresholds.size, dtype=np.float64)
    for vals in regions:
        overlap += (vals.size - np.searchsorted(vals, thresholds, side="left")) / vals.size
    pro = overlap / len(regions)

    inside = fpr <= fpr_limit
    if not inside.any():
        return 0.0
    xs = list(fpr[inside])
    ys = list(pro[inside])
    if inside.sum() < fpr.size and xs[-1] < fpr_limit:
        j = int(inside.sum())  # fpr is non-decreasing, so points split cleanly
        x0, x1 = fpr[j - 1], fpr[j]
        y0, y1 = pro[j - 1], pro[j]
        xs.append(fpr_limit)
        ys.append(y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0))
    return float(np.trapezoid(ys, xs) / fpr_limit)


@dataclass
class CategoryMetrics:
    """One report row; a metric is None when undefined for the inputs."""

    category: str
    n_images: int
    n_anomalous: int
    image_auc: Optional[float] = None
    pixel_ap: Optional[float] = None
    pixel_ap_per_image: Optional[float] = None
    pro: Optional[float] = None
    iap: Optional[float] = None
    iap_at_90: Optional[float] = None


REPORT_COLUMNS = tuple(f.name for f in fields(CategoryMetrics))


def compute_category_metrics(
    category: str,
    scores: Sequence[float],
    labels: Sequence[int],
    maps: Sequence,
    masks: Sequence,
) -> CategoryMetrics:
    """All metrics for one category; undefined ones come back as None."""
    row = CategoryMetrics(
        category=category,
        n_images=len(maps),
        n_anomalous=int(np.asarray(labels).sum()),
    )

    def guarded(fn, *args):
        try:
            return fn(*args)
        except UndefinedMetricError:
            return None

    row.image_auc = guarded(image_auc, scores, labels)
    row.pixel_ap = guarded(pixel_ap, maps, masks)
    row.pixel_ap_per_image = guarded(pixel_ap_per_image, maps, masks)
    row.pro = guarded(pro_score, maps, masks)
    row.iap = guarded(iap, maps, masks)
    row.iap_at_90 = guarded(iap_at_k, maps, masks, 90.0)
    return row


def aggregate_metrics(rows: Sequence[CategoryMetrics]) -> CategoryMetrics:
    """Mean over categories (per metric, over the rows where it is defined)."""
    if not rows:
        raise ValueError("nothing to aggregate")
    agg = CategoryMetrics(
        category="average",
        n_images=sum(r.n_images for r in rows),
        n_anomalous=sum(r.n_anomalous for r in rows),
    )
    for name in REPORT_COLUMNS[3:]:
        defined = [getattr(r, name) for r in rows if getattr(r, name) is not None]
        if defined:
            setattr(agg, name, float(np.mean(defined)))
    return agg


def write_report_json(path, rows: Sequence[CategoryMetrics]):
    payload = [{name: getattr(r, name) for name in REPORT_COLUMNS} for r in rows]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(path, rows: Sequence[CategoryMetrics]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    "" if (v := getattr(r, name)) is None
                    else f"{v:.6f}" if isinstance(v, float) else v
                    for name in REPORT_COLUMNS
                ]
            )
