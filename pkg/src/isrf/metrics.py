"""Segmentation and reconstruction quality measures: IoU, pixel accuracy,
average precision over score thresholds, and PSNR."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass
class MaskMetrics:
    mean_iou: float
    accuracy: float
    map: float


def _binary_pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def iou(pred, gt) -> float:
    """Intersection over union; defined 1 when both masks are empty."""
    pred, gt = _binary_pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def accuracy(pred, gt) -> float:
    pred, gt = _binary_pair(pred, gt)
    return np.count_nonzero(pred == gt) / pred.size


def confusion_counts(pred, gt):
    pred, gt = _binary_pair(pred, gt)
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    tn = np.count_nonzero(~pred & ~gt)
    return tp, fp, fn, tn


def average_precision(scores, gt) -> float:
    """Area under the precision-recall curve, thresholds swept over every
    distinct score value, trapezoidal over recall.

    Empty ground truth is defined as 0 with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt).astype(bool).reshape(-1)
    if scores.shape != gt.shape:
        raise InvalidInputError("scores and ground truth must have the same size")
    if scores.min() < 0 or scores.max() > 1:
        raise InvalidInputError("scores must lie in [0, 1]")
    pos = np.count_nonzero(gt)
    if pos == 0:
        warnings.warn("average_precision: empty ground truth, returning 0")
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    g_sorted = gt[order]
    tp_cum = np.cumsum(g_sorted)
    n_cum = np.arange(1, scores.size + 1)
    # one PR point per distinct score: the last index of each score run
    last = np.nonzero(np.diff(s_sorted, append=np.nan))[0]
    precision = tp_cum[last] / n_cum[last]
    recall = tp_cum[last] / pos
    # anchor the curve at recall 0 with the first (tightest) precision
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[precision[0]], precision])
    return float(np.trapezoid(p, r))


def psnr(img, ref) -> float:
    """10 log10(1 / MSE) on [0, 1] images, capped at 100 dB."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise InvalidInputError(f"shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def mask_metrics(preds, gts, scores=None) -> MaskMetrics:
    """Per-view means of IoU and accuracy; mAP averages the per-view AP of
    the soft scores (falling back to binary predictions as scores)."""
    if len(preds) != len(gts) or not preds:
        raise InvalidInputError("need equal, non-empty prediction/ground-truth lists")
    ious = [iou(p, g) for p, g in zip(preds, gts)]
    accs = [accuracy(p, g) for p, g in zip(preds, gts)]
    if scores is None:
        scores = [np.asarray(p, dtype=np.float64) for p in preds]
    aps = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for s, g in zip(scores, gts):
            aps.append(average_precision(s, g))
    return MaskMetrics(float(np.mean(ious)), float(np.mean(accs)), float(np.mean(aps)))
