"""Loss terms and ramp-up weight schedules for the training objective.

Sign convention: the reweighted boundary cross-entropy is the negated form
of the weighted log expression, so it is non-negative and minimized when the
prediction matches the target. The class-balance weight is computed per
image per channel: the positive term is weighted by the non-boundary pixel
fraction and vice versa, so degenerate all-zero / all-one channels contribute
exactly zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    abs_,
    add,
    clip,
    log,
    mul,
    softmax_cross_entropy,
    sub,
    sum_,
)

PROB_CLAMP = 1e-6
RAMP_KINDS = ("sigmoid_15pct", "linear_full", "constant")


@dataclass
class LossWeights:
    lam_unsup: float = 1.0  # overall unsupervised weight
    lam_seg: float = 1.0  # unsupervised segmentation weight (ramp target)
    lam_bdry: float = 1.0  # boundary weight (ramp target)
    tau: float = 0.0  # segmentation confidence threshold
    tau_bdry: float = 0.5  # boundary pseudo-label threshold

    def __post_init__(self):
        for name in ("lam_unsup", "lam_seg", "lam_bdry"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("tau", "tau_bdry"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class RampSchedule:
    kind: str
    total_iters: int
    target: float

    def __post_init__(self):
        if self.kind not in RAMP_KINDS:
            raise ValueError(f"unknown ramp kind {self.kind!r}, expected {RAMP_KINDS}")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")

    def value(self, t: int) -> float:
        if self.kind == "constant":
            return self.target
        if self.kind == "linear_full":
            return self.target * min(t / self.total_iters, 1.0)
        # sigmoid ramp reaching the target after 15% of training
        span = 0.15 * self.total_iters
        frac = min(t / span, 1.0) if span > 0 else 1.0
        return self.target * float(np.exp(-5.0 * (1.0 - frac) ** 2))


def seg_supervised_loss(
    logits: Tensor, labels: np.ndarray, ignore: int = 255
) -> Tuple[Tensor, int]:
    """Mean cross-entropy over non-ignore pixels; returns (loss, pixel count)."""
    labels = np.asarray(labels)
    valid = labels != ignore
    count = int(valid.sum())
    if count == 0:
        warnings.warn("seg_supervised_loss: no supervised pixels in batch")
        return Tensor(np.float32(0.0)), 0
    targets = np.where(valid, labels, 0)
    weight = valid.astype(np.float32)
    return softmax_cross_entropy(logits, targets, weight, float(count)), count


def seg_consistency_from_hard(
    student_logits: Tensor, hard_labels: np.ndarray, conf_mask: np.ndarray
) -> Tensor:
    """Pseudo-label cross-entropy normalized over all pixels (B*H*W)."""
    n, _, h, w = student_logits.data.shape
    weight = conf_mask.astype(np.float32)
    return softmax_cross_entropy(
        student_logits, hard_labels, weight, float(n * h * w)
    )


def seg_consistency_loss(
    student_logits: Tensor, teacher_probs: np.ndarray, tau: float
) -> Tensor:
    """Consistency loss against thresholded hard pseudo-labels."""
    hard = teacher_probs.argmax(axis=1)
    conf = teacher_probs.max(axis=1)
    return seg_consistency_from_hard(student_logits, hard, conf >= tau)


def bdry_bce_reweighted(z: np.ndarray, q: Tensor) -> Tensor:
    """Class-balanced binary cross-entropy between target maps and probabilities."""
    z = np.asarray(z, dtype=np.float32)
    if z.shape != q.data.shape:
        raise ValueError(f"boundary target shape {z.shape} != prediction {q.shape}")
    n, c, h, w = z.shape
    beta = z.mean(axis=(2, 3), keepdims=True)  # boundary-pixel fraction per (b, c)
    w_neg = (beta * (1.0 - z)).astype(np.float32)
    w_pos = ((1.0 - beta) * z).astype(np.float32)
    qc = clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP)
    term = add(
        mul(Tensor(w_neg), log(sub(1.0, qc))),
        mul(Tensor(w_pos), log(qc)),
    )
    return mul(sum_(term), -1.0 / (n * c * h * w))


def bdry_supervised_loss(heads: Sequence[Tensor], z: np.ndarray) -> Tensor:
    """Sum of the reweighted BCE over every supervised boundary head."""
    if not heads:
        raise ValueError("bdry_supervised_loss: empty head list")
    total = bdry_bce_reweighted(z, heads[0])
    for q in heads[1:]:
        total = add(total, bdry_bce_reweighted(z, q))
    return total


def bdry_consistency_loss(
    student_heads: Sequence[Tensor], teacher_q: np.ndarray, tau_bdry: float
) -> Tensor:
    """Boundary consistency against thresholded teacher boundary maps."""
    z_hat = (np.asarray(teacher_q) >= tau_bdry).astype(np.float32)
    return bdry_supervised_loss(student_heads, z_hat)


def duality_loss(q_gradm: Tensor, z: np.ndarray) -> Tensor:
    """Mean absolute gap between the mask spatial gradient and boundary targets."""
    z = np.asarray(z, dtype=np.float32)
    if z.shape != q_gradm.data.shape:
        raise ValueError(f"boundary target shape {z.shape} != gradient map {q_gradm.shape}")
    return mul(sum_(abs_(sub(q_gradm, Tensor(z)))), 1.0 / z.size)


@dataclass
class LossParts:
    seg_sup: Tensor
    bdry_sup: Optional[Tensor] = None
    dual: Optional[Tensor] = None
    seg_cons: Optional[Tensor] = None
    bdry_cons: Optional[Tensor] = None


def total_loss(
    parts: LossParts,
    weights: LossWeights,
    schedules: Dict[str, RampSchedule],
    t: int,
) -> Tuple[Tensor, Dict[str, float]]:
    """Combine labeled, duality and weighted unsupervised terms at iteration t.

    Disabled terms (None) are skipped entirely, so they contribute exactly
    zero and the reduced objective is bit-identical to a plain
    supervised+consistency step.
    """
    lam_seg_t = schedules["seg"].value(t)
    lam_bdry_t = schedules["bdry"].value(t)

    labeled = parts.seg_sup
    if parts.bdry_sup is not None:
        labeled = add(labeled, mul(parts.bdry_sup, lam_bdry_t))
    if parts.dual is not None:
        labeled = add(labeled, parts.dual)

    unsup: Optional[Tensor] = None
    if parts.seg_cons is not None:
        unsup = mul(parts.seg_cons, lam_seg_t)
    if parts.bdry_cons is not None:
        scaled = mul(parts.bdry_cons, lam_bdry_t)
        unsup = scaled if unsup is None else add(unsup, scaled)

    total = labeled
    if unsup is not None:
        total = add(total, mul(unsup, weights.lam_unsup))

    def val(x: Optional[Tensor]) -> float:
        return float(x.item()) if x is not None else 0.0

    breakdown = {
        "total": float(total.item()),
        "seg_sup": val(parts.seg_sup),
        "bdry_sup": val(parts.bdry_sup),
        "dual": val(parts.dual),
        "seg_cons": val(parts.seg_cons),
        "bdry_cons": val(parts.bdry_cons),
        "lam_seg_t": lam_seg_t,
        "lam_bdry_t": lam_bdry_t,
    }
    return total, breakdown
