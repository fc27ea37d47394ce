"""Evaluation metrics: mIoU, boundary IoU, boundary F1, and MF at ODS.

Boundary bands come from min-pooling the one-hot mask with ones padding
(erosion removes interior support only, so a full-frame mask has no
boundary) and XOR-ing with the mask. Tolerant matching max-pools the
counterpart band with zeros padding. Per-class counts accumulate over the
whole dataset before the final division; classes absent from both
prediction and ground truth are excluded from means.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_BAND_K = 11
MF_THRESHOLDS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2).tolist())


def _as_batch(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    return arr[None] if arr.ndim == 2 else arr


def _pool1d(mask: np.ndarray, k: int, axis: int, pad_value: bool, reduce) -> np.ndarray:
    r = k // 2
    pad = [(0, 0)] * mask.ndim
    pad[axis] = (r, r)
    padded = np.pad(mask, pad, constant_values=pad_value)
    out = None
    for off in range(k):
        view = np.take(padded, np.arange(off, off + mask.shape[axis]), axis=axis)
        out = view if out is None else reduce(out, view)
    return out


def min_pool(mask: np.ndarray, k: int) -> np.ndarray:
    """k x k min-pool (stride 1) of a boolean map, padded with ones."""
    if k % 2 == 0:
        raise ValueError(f"band kernel k must be odd, got {k}")
    out = _pool1d(mask, k, mask.ndim - 2, True, np.logical_and)
    return _pool1d(out, k, mask.ndim - 1, True, np.logical_and)


def max_pool(mask: np.ndarray, k: int) -> np.ndarray:
    """k x k max-pool (stride 1) of a boolean map, padded with zeros."""
    if k % 2 == 0:
        raise ValueError(f"band kernel k must be odd, got {k}")
    out = _pool1d(mask, k, mask.ndim - 2, False, np.logical_or)
    return _pool1d(out, k, mask.ndim - 1, False, np.logical_or)


def boundary_band(mask: np.ndarray, k: int) -> np.ndarray:
    """Inner boundary band: mask XOR its k x k erosion."""
    mask = np.asarray(mask, dtype=bool)
    return mask ^ min_pool(mask, k)


def confusion_matrix(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = 255
) -> np.ndarray:
    pred, gt = _as_batch(pred), _as_batch(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = gt != ignore
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def miou(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = 255
) -> Tuple[np.ndarray, float]:
    """Per-class IoU (NaN where the class is absent from both) and its mean."""
    cm = confusion_matrix(pred, gt, num_classes, ignore)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    mean = float(np.nanmean(per_class)) if np.any(union > 0) else float("nan")
    return per_class, mean


def boundary_iou(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    k: int = DEFAULT_BAND_K,
    ignore: int = 255,
) -> Tuple[np.ndarray, float]:
    """IoU of one-hot masks restricted to the ground-truth boundary band."""
    pred, gt = _as_batch(pred), _as_batch(gt)
    valid = gt != ignore
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        gt_c = (gt == c) & valid
        pred_c = (pred == c) & valid
        band = boundary_band(gt_c, k)
        inter[c] += int((band & pred_c & gt_c).sum())
        union[c] += int((band & (pred_c | gt_c)).sum())
    per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    mean = float(np.nanmean(per_class)) if np.any(union > 0) else float("nan")
    return per_class, mean


def _tolerant_counts(
    pred_b: np.ndarray, gt_b: np.ndarray, k: int
) -> Tuple[int, int, int, int]:
    """(matched pred, total pred, matched gt, total gt) under k-dilated matching."""
    tp_prec = int((pred_b & max_pool(gt_b, k)).sum())
    tp_rec = int((max_pool(pred_b, k) & gt_b).sum())
    return tp_prec, int(pred_b.sum()), tp_rec, int(gt_b.sum())


def _f1_from_counts(tp_p: int, n_p: int, tp_r: int, n_r: int) -> float:
    if n_p == 0 and n_r == 0:
        return float("nan")  # class absent from both sides
    prec = tp_p / n_p if n_p else 0.0
    rec = tp_r / n_r if n_r else 0.0
    if prec + rec == 0:
        return 0.0
    return 2.0 * prec * rec / (prec + rec)


def boundary_f1(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    k: int = DEFAULT_BAND_K,
    ignore: int = 255,
) -> Tuple[np.ndarray, float]:
    """Tolerant boundary precision/recall per class, combined harmonically."""
    pred, gt = _as_batch(pred), _as_batch(gt)
    valid = gt != ignore
    per_class = np.full(num_classes, np.nan)
    counts = np.zeros((num_classes, 4), dtype=np.int64)
    for c in range(num_classes):
        pred_b = boundary_band((pred == c) & valid, k)
        gt_b = boundary_band((gt == c) & valid, k)
        counts[c] += _tolerant_counts(pred_b, gt_b, k)
    for c in range(num_classes):
        per_class[c] = _f1_from_counts(*counts[c])
    mean = float(np.nanmean(per_class)) if not np.all(np.isnan(per_class)) else float("nan")
    return per_class, mean


def mf_ods(
    boundary_probs: Sequence[np.ndarray],
    boundary_gts: Sequence[np.ndarray],
    thresholds: Sequence[float] = MF_THRESHOLDS,
    k: int = DEFAULT_BAND_K,
) -> Tuple[float, List[Tuple[float, float]]]:
    """Mean F-measure at the best dataset-wide binarization threshold.

    ``boundary_probs``: per-image (C,H,W) probability maps; ``boundary_gts``:
    matching binary targets. Returns (best mean-F, the full threshold curve).
    """
    if len(boundary_probs) == 0:
        raise ValueError("mf_ods: empty dataset")
    if len(boundary_probs) != len(boundary_gts):
        raise ValueError("mf_ods: prediction/target count mismatch")
    c = boundary_probs[0].shape[0]
    curve = []
    for thr in thresholds:
        counts = np.zeros((c, 4), dtype=np.int64)
        for probs, gts in zip(boundary_probs, boundary_gts):
            pred_b = probs >= thr
            gt_b = np.asarray(gts, dtype=bool)
            for ci in range(c):
                counts[ci] += _tolerant_counts(pred_b[ci], gt_b[ci], k)
        f_per_class = np.array([_f1_from_counts(*counts[ci]) for ci in range(c)])
        mean_f = float(np.nanmean(f_per_class)) if not np.all(np.isnan(f_per_class)) else 0.0
        curve.append((float(thr), mean_f))
    best = max(f for _, f in curve)
    return best, curve


@dataclass
class MetricsReport:
    num_classes: int
    band_k: int
    per_class_iou: List[float]
    miou: float
    per_class_biou: List[float]
    mean_biou: float
    per_class_bf1: List[float]
    mean_bf1: float
    mf_ods: Optional[float] = None

    @staticmethod
    def csv_header() -> str:
        return "miou,mean_biou,mean_bf1,mf_ods,band_k"

    def csv_row(self) -> str:
        mf = "" if self.mf_ods is None else f"{self.mf_ods:.6f}"
        return (
            f"{self.miou:.6f},{self.mean_biou:.6f},{self.mean_bf1:.6f},{mf},{self.band_k}"
        )

    def to_json_dict(self) -> Dict:
        clean = lambda xs: [None if np.isnan(x) else round(float(x), 6) for x in xs]
        return {
            "num_classes": self.num_classes,
            "band_k": self.band_k,
            "per_class_iou": clean(self.per_class_iou),
            "miou": round(float(self.miou), 6),
            "per_class_biou": clean(self.per_class_biou),
            "mean_biou": round(float(self.mean_biou), 6),
            "per_class_bf1": clean(self.per_class_bf1),
            "mean_bf1": round(float(self.mean_bf1), 6),
            "mf_ods": None if self.mf_ods is None else round(float(self.mf_ods), 6),
        }


def evaluate_predictions(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    k: int = DEFAULT_BAND_K,
    ignore: int = 255,
    boundary_probs: Optional[Sequence[np.ndarray]] = None,
    boundary_gts: Optional[Sequence[np.ndarray]] = None,
) -> MetricsReport:
    iou_pc, iou_mean = miou(pred, gt, num_classes, ignore)
    biou_pc, biou_mean = boundary_iou(pred, gt, num_classes, k, ignore)
    bf1_pc, bf1_mean = boundary_f1(pred, gt, num_classes, k, ignore)
    mf: Optional[float] = None
    if boundary_probs is not None and boundary_gts is not None:
        mf, _ = mf_ods(boundary_probs, boundary_gts, k=k)
    return MetricsReport(
        num_classes=num_classes,
        band_k=k,
        per_class_iou=[float(x) for x in iou_pc],
        miou=iou_mean,
        per_class_biou=[float(x) for x in biou_pc],
        mean_biou=biou_mean,
        per_class_bf1=[float(x) for x in bf1_pc],
        mean_bf1=bf1_mean,
        mf_ods=mf,
    )
