"""Weak/strong augmentation pipelines and CutMix for the two-view batches.

The strong view is built *on top of* the weak view and is photometric only,
so pixel (i, j) shows the same scene content in both views. CutMix boxes are
sampled once per batch and applied to the strong images before any forward
pass; the same boxes are applied to teacher pseudo-labels after teacher
inference, keeping supervision aligned.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .boundary_gt import IGNORE_LABEL


@dataclass
class AugmentConfig:
    scale_min: float = 0.5
    scale_max: float = 2.0
    flip_prob: float = 0.5
    jitter: float = 0.3  # brightness/contrast/saturation half-range
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    cutmix_area_min: float = 0.2
    cutmix_area_max: float = 0.5


@dataclass
class GeometryRecord:
    scale: float
    top: int
    left: int
    flip: bool
    pad_top: int = 0
    pad_left: int = 0


def _resize_image(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resize of a float (3,H,W) image (align-corners=false)."""
    from .autodiff.ops import _interp_matrix

    mh = _interp_matrix(img.shape[1], oh)
    mw = _interp_matrix(img.shape[2], ow)
    return np.matmul(np.matmul(mh, img), mw.T)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(np.round(src), 0, n_in - 1).astype(np.int64)


def _resize_labels(lab: np.ndarray, oh: int, ow: int) -> np.ndarray:
    iy = _nearest_index(lab.shape[0], oh)
    ix = _nearest_index(lab.shape[1], ow)
    return lab[iy][:, ix]


def weak_augment(
    image: np.ndarray,
    label: Optional[np.ndarray],
    crop: int,
    rng: np.random.Generator,
    cfg: AugmentConfig,
) -> Tuple[np.ndarray, Optional[np.ndarray], GeometryRecord]:
    """Random rescale + crop (ignore/mean padded) + horizontal flip.

    ``image`` is uint8 (3,H,W); the result is float32 in [0,1]. Labels follow
    the identical geometry with nearest-neighbor sampling.
    """
    img = image.astype(np.float32) / 255.0
    scale = float(rng.uniform(cfg.scale_min, cfg.scale_max))
    oh = max(1, int(round(image.shape[1] * scale)))
    ow = max(1, int(round(image.shape[2] * scale)))
    img = _resize_image(img, oh, ow)
    lab = _resize_labels(label, oh, ow) if label is not None else None

    pad_top = pad_left = 0
    if oh < crop or ow < crop:
        ph, pw = max(crop - oh, 0), max(crop - ow, 0)
        pad_top, pad_left = ph // 2, pw // 2
        fill = img.mean(axis=(1, 2), keepdims=True)
        canvas = np.broadcast_to(fill, (3, max(oh, crop), max(ow, crop))).copy()
        canvas[:, pad_top : pad_top + oh, pad_left : pad_left + ow] = img
        img = canvas
        if lab is not None:
            lcanvas = np.full(
                (max(oh, crop), max(ow, crop)), IGNORE_LABEL, dtype=lab.dtype
            )
            lcanvas[pad_top : pad_top + oh, pad_left : pad_left + ow] = lab
            lab = lcanvas

    top = int(rng.integers(0, img.shape[1] - crop + 1))
    left = int(rng.integers(0, img.shape[2] - crop + 1))
    img = img[:, top : top + crop, left : left + crop]
    if lab is not None:
        lab = lab[top : top + crop, left : left + crop]

    flip = bool(rng.random() < cfg.flip_prob)
    if flip:
        img = img[:, :, ::-1]
        if lab is not None:
            lab = lab[:, ::-1]

    geom = GeometryRecord(scale, top, left, flip, pad_top, pad_left)
    return (
        np.ascontiguousarray(img, dtype=np.float32),
        np.ascontiguousarray(lab) if lab is not None else None,
        geom,
    )


def _gaussian3(img: np.ndarray, sigma: float) -> np.ndarray:
    w1 = float(np.exp(-0.5 / (sigma * sigma)))
    k = np.array([w1, 1.0, w1], dtype=np.float32)
    k /= k.sum()
    pad = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="edge")
    img = k[0] * pad[:, :-2] + k[1] * pad[:, 1:-1] + k[2] * pad[:, 2:]
    pad = np.pad(img, ((0, 0), (0, 0), (1, 1)), mode="edge")
    return k[0] * pad[:, :, :-2] + k[1] * pad[:, :, 1:-1] + k[2] * pad[:, :, 2:]


def strong_augment(
    weak: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig
) -> np.ndarray:
    """Photometric-only strong view: jitter, grayscale, blur. Geometry unchanged."""
    img = weak.copy()
    j = cfg.jitter
    if j > 0:
        img = img * float(rng.uniform(1 - j, 1 + j))  # brightness
        mean = img.mean()
        img = (img - mean) * float(rng.uniform(1 - j, 1 + j)) + mean  # contrast
        gray = img.mean(axis=0, keepdims=True)
        img = gray + (img - gray) * float(rng.uniform(1 - j, 1 + j))  # saturation
    if cfg.grayscale_prob > 0 and rng.random() < cfg.grayscale_prob:
        img = np.broadcast_to(img.mean(axis=0, keepdims=True), img.shape).copy()
    if cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        img = _gaussian3(img, sigma=float(rng.uniform(0.1, 2.0)))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class CutMixRecord:
    boxes: List[Tuple[int, int, int, int]]  # (top, left, h, w) per sample
    partner: np.ndarray  # partner sample index per sample

    def is_noop(self) -> bool:
        return len(self.boxes) == 0


def sample_cutmix(
    batch: int, height: int, width: int, rng: np.random.Generator, cfg: AugmentConfig
) -> CutMixRecord:
    """Box + partner assignment per sample; a batch of one is a no-op."""
    if batch < 2:
        return CutMixRecord(boxes=[], partner=np.arange(batch))
    shift = int(rng.integers(1, batch))
    partner = (np.arange(batch) + shift) % batch
    boxes = []
    for _ in range(batch):
        area = float(rng.uniform(cfg.cutmix_area_min, cfg.cutmix_area_max))
        bh = max(1, min(height, int(round(height * np.sqrt(area)))))
        bw = max(1, min(width, int(round(width * np.sqrt(area)))))
        top = int(rng.integers(0, height - bh + 1))
        left = int(rng.integers(0, width - bw + 1))
        boxes.append((top, left, bh, bw))
    return CutMixRecord(boxes=boxes, partner=partner)


def apply_cutmix(arr: np.ndarray, rec: CutMixRecord) -> np.ndarray:
    """Paste each sample's partner content inside its box.

    Works for images (B,3,H,W), label maps (B,H,W), masks (B,H,W) and
    boundary targets (B,C,H,W) alike; all follow the same boxes.
    """
    if rec.is_noop():
        return arr.copy()
    out = arr.copy()
    for b, (top, left, bh, bw) in enumerate(rec.boxes):
        src = rec.partner[b]
        out[b, ..., top : top + bh, left : left + bw] = arr[
            src, ..., top : top + bh, left : left + bw
        ]
    return out


def cutmix(
    images: np.ndarray,
    pseudo_labels: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
) -> Tuple[np.ndarray, np.ndarray, CutMixRecord]:
    """Mix a batch of strong views together with their pseudo-labels."""
    rec = sample_cutmix(images.shape[0], images.shape[-2], images.shape[-1], rng, cfg)
    return apply_cutmix(images, rec), apply_cutmix(pseudo_labels, rec), rec
