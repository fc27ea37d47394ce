"""On-the-fly semantic and binary boundary targets from label maps.

A pixel of class c is a boundary pixel iff some pixel of a *different*,
non-ignore class lies within Euclidean distance ``radius``. Both sides of
every class transition are marked, and ignore-labeled pixels neither carry
nor trigger marks.

The distance query runs as a two-pass exact Euclidean distance transform:
pass one scans rows for the nearest in-row feature column, pass two reduces
(row offset)^2 + (row distance)^2 over a band of rows. Regenerating targets
after any label resize keeps the band width constant in pixels, which is the
point of doing this on the fly.
"""

from __future__ import annotations

import numpy as np

IGNORE_LABEL = 255


def _row_feature_distance(feature: np.ndarray) -> np.ndarray:
    """Per-pixel distance (in columns) to the nearest feature in its row."""
    h, w = feature.shape
    inf = h + w + 1
    dist = np.where(feature, 0, inf).astype(np.int64)
    for j in range(1, w):
        np.minimum(dist[:, j], dist[:, j - 1] + 1, out=dist[:, j])
    for j in range(w - 2, -1, -1):
        np.minimum(dist[:, j], dist[:, j + 1] + 1, out=dist[:, j])
    return dist


def _within_distance(feature: np.ndarray, radius: int) -> np.ndarray:
    """Boolean map of pixels within Euclidean ``radius`` of a feature pixel."""
    h, w = feature.shape
    g = _row_feature_distance(feature)
    g2 = g * g
    r2 = radius * radius
    best = np.full((h, w), r2 + 1, dtype=np.int64)
    for i in range(h):
        lo = max(0, i - radius)
        hi = min(h, i + radius + 1)
        rows = np.arange(lo, hi)
        cand = g2[lo:hi] + ((i - rows) ** 2)[:, None]
        best[i] = cand.min(axis=0)
    return best <= r2


def semantic_boundaries(
    labels: np.ndarray,
    num_classes: int,
    radius: int = 2,
    ignore: int = IGNORE_LABEL,
) -> np.ndarray:
    """Per-class binary boundary maps, shape (num_classes, H, W), uint8."""
    if radius < 1:
        raise ValueError(f"boundary radius must be >= 1, got {radius}")
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    valid = labels != ignore
    if valid.any() and int(labels[valid].max()) >= num_classes:
        raise ValueError(
            f"label map contains class {int(labels[valid].max())} "
            f">= num_classes {num_classes}"
        )
    h, w = labels.shape
    z = np.zeros((num_classes, h, w), dtype=np.uint8)
    present = np.unique(labels[valid]) if valid.any() else []
    for c in present:
        other = valid & (labels != c)
        if not other.any():
            continue
        near = _within_distance(other, radius)
        z[c] = ((labels == c) & near).astype(np.uint8)
    return z


def binary_boundaries(
    labels: np.ndarray, radius: int = 2, ignore: int = IGNORE_LABEL
) -> np.ndarray:
    """Union over classes of the semantic boundary channels, shape (1, H, W)."""
    labels = np.asarray(labels)
    valid = labels != ignore
    num_classes = int(labels[valid].max()) + 1 if valid.any() else 1
    z = semantic_boundaries(labels, num_classes, radius, ignore)
    return np.clip(z.sum(axis=0, dtype=np.int32), 0, 1).astype(np.uint8)[None]


def derive_boundaries_from_prediction(
    pred_labels: np.ndarray,
    num_classes: int,
    radius: int = 2,
    ignore: int = IGNORE_LABEL,
) -> np.ndarray:
    """Boundary targets recomputed from an argmax pseudo-label map."""
    return semantic_boundaries(pred_labels, num_classes, radius, ignore)
