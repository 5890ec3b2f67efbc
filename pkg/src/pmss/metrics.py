"""Segmentation metrics from exact integer confusion counts."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def _flatten_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred.reshape(-1), gt.reshape(-1)


def confusion(pred, gt, k: int, ignore_index: int | None = None) -> np.ndarray:
    """KxK matrix: rows ground truth, columns prediction, int64 counts."""
    p, g = _flatten_pair(pred, gt)
    if ignore_index is not None:
        keep = g != ignore_index
        p, g = p[keep], g[keep]
    if p.size and (p.min() < 0 or p.max() >= k or g.min() < 0 or g.max() >= k):
        raise ValueError(f"labels outside [0,{k})")
    return np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def miou(pred, gt, k: int, ignore_index: int | None = None) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both sides) and their mean.

    IoU_c = TP / (TP + FP + FN); classes with an empty union never enter the
    mean.
    """
    cm = confusion(pred, gt, k, ignore_index)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    present = union > 0
    mean = float(per_class[present].mean()) if present.any() else float("nan")
    return per_class, mean


def dice(pred, gt, foreground_class: int) -> float:
    """2*TP / (2*TP + FP + FN) on the chosen foreground; empty-vs-empty is 1."""
    p, g = _flatten_pair(pred, gt)
    pf = p == foreground_class
    gf = g == foreground_class
    tp = int(np.count_nonzero(pf & gf))
    fp = int(np.count_nonzero(pf & ~gf))
    fn = int(np.count_nonzero(~pf & gf))
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)
