"""Teacher-student training loop with harmonious batch-norm updates.

One iteration: (1) teacher forward on the full (labeled, weak, strong)
batch — in train mode when HBN is on, so its BN buffers accumulate from its
own activations; (2) hard pseudo-labels from the weak views; (3) student
forward on the same full batch (the weak views feed its BN statistics only);
(4) supervised + consistency losses, SGD step with poly decay; (5) EMA of
the weights only — BN buffers are never EMA-mixed.

With ``hbn=False`` the teacher runs in eval mode and its BN buffers are
overwritten with the student's at the end of every iteration (the
copy-style update used as the contrast arm).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import augment as aug
from . import boundary_gt, metrics
from .autodiff import Tensor, no_grad, slice_batch
from .dataset import Dataset, DataError, DatasetSplit, make_split
from .losses import (
    LossParts,
    LossWeights,
    RampSchedule,
    bdry_supervised_loss,
    duality_loss,
    seg_consistency_from_hard,
    seg_supervised_loss,
    total_loss,
)
from .model import ForwardOutputs, ModelConfig, SegBoundaryNet

BOUNDARY_SOURCES = ("learned", "derived")

# rng stream tags
_RNG_BATCH, _RNG_AUG, _RNG_CUTMIX = 11, 12, 13


@dataclass
class TrainerConfig:
    total_iters: int = 3000
    base_lr: float = 0.05
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    crop: int = 64
    ema_decay: float = 0.99
    bn_momentum: float = 0.1
    hbn: bool = True
    semi: bool = True
    boundary_source: str = "learned"
    boundary_radius: int = 2
    label_fraction: float = 0.125
    eval_every: int = 0  # 0 -> total_iters // 20
    weights: LossWeights = field(default_factory=LossWeights)
    ramp_seg: str = "sigmoid_15pct"
    ramp_bdry: str = "linear_full"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.boundary_source not in BOUNDARY_SOURCES:
            raise ValueError(
                f"boundary_source must be one of {BOUNDARY_SOURCES}, got "
                f"{self.boundary_source!r}"
            )
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")

    def schedules(self) -> Dict[str, RampSchedule]:
        return {
            "seg": RampSchedule(self.ramp_seg, self.total_iters, self.weights.lam_seg),
            "bdry": RampSchedule(self.ramp_bdry, self.total_iters, self.weights.lam_bdry),
        }

    def cadence(self) -> int:
        return self.eval_every if self.eval_every > 0 else max(1, self.total_iters // 20)


@dataclass
class ModelState:
    student: SegBoundaryNet
    teacher: SegBoundaryNet
    t: int = 0


def init_state(model_cfg: ModelConfig, cfg: TrainerConfig, seed: int) -> ModelState:
    student = SegBoundaryNet(model_cfg, seed=seed, bn_momentum=cfg.bn_momentum)
    teacher = SegBoundaryNet(model_cfg, seed=seed, bn_momentum=cfg.bn_momentum)
    teacher.set_requires_grad(False)
    # identical init by construction (same seed); assert to be safe
    sp, tp = student.parameters(), teacher.parameters()
    assert list(sp) == list(tp)
    return ModelState(student=student, teacher=teacher)


def ema_update(teacher: SegBoundaryNet, student: SegBoundaryNet, alpha: float) -> None:
    """Teacher weights <- alpha * teacher + (1 - alpha) * student. Weights only:
    BN running buffers are excluded."""
    sp = student.parameters()
    tp = teacher.parameters()
    if list(sp) != list(tp):
        raise ValueError("ema_update: student/teacher parameter structures differ")
    for name, t in tp.items():
        t.data = alpha * t.data + (1.0 - alpha) * sp[name].data


class SGD:
    def __init__(self, params: Dict[str, Tensor], momentum: float, weight_decay: float):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data = p.data - lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def poly_lr(base_lr: float, t: int, total: int, power: float) -> float:
    return base_lr * (1.0 - t / total) ** power


def make_seg_pseudo_labels(
    teacher_probs: np.ndarray, tau: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax hard labels (ties -> lowest class index) and the confidence mask."""
    hard = teacher_probs.argmax(axis=1)
    conf = teacher_probs.max(axis=1)
    return hard, conf >= tau


def make_bdry_pseudo_labels(
    teacher_q: Optional[np.ndarray],
    tau_bdry: float,
    source: str,
    hard_labels: np.ndarray,
    num_classes: int,
    boundary_mode: str,
    radius: int,
) -> np.ndarray:
    """Boundary targets from the teacher: thresholded map or re-derived."""
    if source == "learned":
        return (teacher_q >= tau_bdry).astype(np.float32)
    maps = []
    for b in range(hard_labels.shape[0]):
        if boundary_mode == "binary":
            maps.append(boundary_gt.binary_boundaries(hard_labels[b], radius))
        else:
            maps.append(
                boundary_gt.semantic_boundaries(hard_labels[b], num_classes, radius)
            )
    return np.stack(maps).astype(np.float32)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class TrainBatch:
    x: np.ndarray  # labeled images (B_L,3,H,W) float32
    y: np.ndarray  # labels (B_L,H,W) uint8/int
    uw: Optional[np.ndarray] = None  # weak unlabeled views
    us: Optional[np.ndarray] = None  # strong unlabeled views (pre-CutMix)


def sample_batch(
    data: Dataset,
    split: DatasetSplit,
    cfg: TrainerConfig,
    aug_cfg: aug.AugmentConfig,
    seed: int,
    t: int,
) -> TrainBatch:
    rng = np.random.default_rng((seed, _RNG_BATCH, t))
    lab_pool = np.asarray(split.labeled)
    lab_idx = rng.choice(lab_pool, size=cfg.batch_labeled, replace=len(lab_pool) < cfg.batch_labeled)
    xs, ys = [], []
    for slot, i in enumerate(lab_idx):
        r = np.random.default_rng((seed, _RNG_AUG, t, slot))
        img, lab, _ = aug.weak_augment(data.images[i], data.labels[i], cfg.crop, r, aug_cfg)
        xs.append(img)
        ys.append(lab)
    batch = TrainBatch(x=np.stack(xs), y=np.stack(ys))
    if cfg.semi and split.unlabeled:
        unl_pool = np.asarray(split.unlabeled)
        unl_idx = rng.choice(
            unl_pool, size=cfg.batch_unlabeled, replace=len(unl_pool) < cfg.batch_unlabeled
        )
        uws, uss = [], []
        for slot, i in enumerate(unl_idx):
            r = np.random.default_rng((seed, _RNG_AUG, t, 1000 + slot))
            weak, _, _ = aug.weak_augment(data.images[i], None, cfg.crop, r, aug_cfg)
            strong = aug.strong_augment(weak, r, aug_cfg)
            uws.append(weak)
            uss.append(strong)
        batch.uw = np.stack(uws)
        batch.us = np.stack(uss)
    return batch


def run_iteration(
    state: ModelState,
    batch: TrainBatch,
    model_cfg: ModelConfig,
    cfg: TrainerConfig,
    optimizer: SGD,
    aug_cfg: aug.AugmentConfig,
    seed: int,
) -> Dict[str, float]:
    """One full training step; returns the loss breakdown for logging."""
    t = state.t
    lr = poly_lr(cfg.base_lr, t, cfg.total_iters, cfg.poly_power)
    bl = batch.x.shape[0]
    semi = batch.uw is not None and batch.us is not None
    use_boundary = model_cfg.boundary_channels > 0
    cb = model_cfg.boundary_channels

    if semi:
        bu = batch.uw.shape[0]
        rec = aug.sample_cutmix(
            bu, batch.us.shape[-2], batch.us.shape[-1],
            np.random.default_rng((seed, _RNG_CUTMIX, t)), aug_cfg,
        )
        us_mixed = aug.apply_cutmix(batch.us, rec)
        full = np.concatenate([batch.x, batch.uw, us_mixed], axis=0)
    else:
        bu = 0
        full = batch.x

    # teacher pass: train-mode BN under HBN, eval-mode with copied buffers otherwise
    hard = conf_mask = z_hat = None
    with no_grad():
        out_t = state.teacher.forward(Tensor(full), train=cfg.hbn)
    if semi:
        probs_w = _softmax_np(out_t.seg_logits.data[bl : bl + bu])
        hard, conf_mask = make_seg_pseudo_labels(probs_w, cfg.weights.tau)
        if use_boundary:
            q_src = out_t.q_refine if model_cfg.use_sgf else out_t.q_fuse
            z_hat = make_bdry_pseudo_labels(
                q_src.data[bl : bl + bu],
                cfg.weights.tau_bdry,
                cfg.boundary_source,
                hard,
                model_cfg.num_classes,
                model_cfg.boundary_mode,
                cfg.boundary_radius,
            )
        hard = aug.apply_cutmix(hard, rec)
        conf_mask = aug.apply_cutmix(conf_mask, rec)
        if z_hat is not None:
            z_hat = aug.apply_cutmix(z_hat, rec)

    out_s = state.student.forward(Tensor(full), train=True)

    logits_l = slice_batch(out_s.seg_logits, 0, bl)
    seg_sup, sup_pixels = seg_supervised_loss(logits_l, batch.y)
    parts = LossParts(seg_sup=seg_sup)

    if use_boundary:
        z_l = _boundary_targets(batch.y, model_cfg, cfg.boundary_radius)
        heads_l = [slice_batch(q, 0, bl) for q in out_s.boundary_heads()]
        parts.bdry_sup = bdry_supervised_loss(heads_l, z_l)
        if model_cfg.use_sgf:
            parts.dual = duality_loss(slice_batch(out_s.q_gradm, 0, bl), z_l)

    if semi:
        logits_s = slice_batch(out_s.seg_logits, bl + bu, bl + 2 * bu)
        parts.seg_cons = seg_consistency_from_hard(logits_s, hard, conf_mask)
        if use_boundary:
            heads_s = [
                slice_batch(q, bl + bu, bl + 2 * bu) for q in out_s.boundary_heads()
            ]
            parts.bdry_cons = bdry_supervised_loss(heads_s, z_hat)

    loss, breakdown = total_loss(parts, cfg.weights, cfg.schedules(), t)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)

    ema_update(state.teacher, state.student, cfg.ema_decay)
    if not cfg.hbn:
        s_states = state.student.bn_states()
        for name, t_state in state.teacher.bn_states().items():
            t_state.copy_buffers_from(s_states[name])

    state.t += 1
    breakdown["lr"] = lr
    breakdown["sup_pixels"] = float(sup_pixels)
    return breakdown


def _boundary_targets(
    labels: np.ndarray, model_cfg: ModelConfig, radius: int
) -> np.ndarray:
    maps = []
    for b in range(labels.shape[0]):
        if model_cfg.boundary_mode == "binary":
            maps.append(boundary_gt.binary_boundaries(labels[b], radius))
        else:
            maps.append(
                boundary_gt.semantic_boundaries(
                    labels[b], model_cfg.num_classes, radius
                )
            )
    return np.stack(maps).astype(np.float32)


def evaluate(
    net: SegBoundaryNet,
    data: Dataset,
    indices: Sequence[int],
    band_k: int,
    with_mf: bool = False,
    batch_size: int = 16,
    boundary_radius: int = 2,
) -> metrics.MetricsReport:
    """Eval-mode inference over a split; metrics accumulate dataset-wide."""
    preds, gts = [], []
    bprobs, bgts = [], []
    use_boundary = net.cfg.boundary_channels > 0
    for start in range(0, len(indices), batch_size):
        chunk = list(indices[start : start + batch_size])
        imgs = data.images[chunk].astype(np.float32) / 255.0
        with no_grad():
            out = net.forward(Tensor(imgs), train=False)
        preds.append(out.seg_logits.data.argmax(axis=1))
        gts.append(data.labels[chunk])
        if use_boundary and with_mf:
            q = out.q_refine if net.cfg.use_sgf else out.q_fuse
            for j, idx in enumerate(chunk):
                bprobs.append(q.data[j])
                if net.cfg.boundary_mode == "binary":
                    bgts.append(boundary_gt.binary_boundaries(data.labels[idx], boundary_radius))
                else:
                    bgts.append(
                        boundary_gt.semantic_boundaries(
                            data.labels[idx], net.cfg.num_classes, boundary_radius
                        )
                    )
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    return metrics.evaluate_predictions(
        pred,
        gt,
        net.cfg.num_classes,
        k=band_k,
        boundary_probs=bprobs if bprobs else None,
        boundary_gts=bgts if bgts else None,
    )


# -- checkpoints ------------------------------------------------------------------

CHECKPOINT_MAGIC = b"BMCK1"


class CheckpointError(DataError):
    pass


def _state_records(state: ModelState) -> Dict[str, np.ndarray]:
    records: Dict[str, np.ndarray] = {}
    for prefix, net in (("student", state.student), ("teacher", state.teacher)):
        for name, p in net.parameters().items():
            records[f"{prefix}.{name}"] = p.data
        for name, buf in net.bn_buffers().items():
            records[f"{prefix}.{name}"] = buf
    return records


def save_checkpoint(path, state: ModelState) -> None:
    payload = [CHECKPOINT_MAGIC]
    for name, arr in _state_records(state).items():
        blob = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        payload.append(struct.pack("<I", len(blob)))
        payload.append(blob)
        payload.append(struct.pack("<I", arr32.ndim))
        payload.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        payload.append(arr32.tobytes())
    Path(path).write_bytes(b"".join(payload))


def read_checkpoint_records(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)
    records: Dict[str, np.ndarray] = {}
    while pos < len(raw):
        try:
            (name_len,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"{path}: truncated checkpoint ({e})") from e
        records[name] = arr.reshape(dims).copy()
    return records


def load_checkpoint(path, model_cfg: ModelConfig, bn_momentum: float) -> ModelState:
    records = read_checkpoint_records(path)
    cfg = TrainerConfig(bn_momentum=bn_momentum)
    state = init_state(model_cfg, cfg, seed=0)
    expected = _state_records(state)
    missing = sorted(set(expected) - set(records))
    extra = sorted(set(records) - set(expected))
    if missing or extra:
        raise CheckpointError(
            f"{path}: checkpoint/model config mismatch "
            f"(missing {missing[:4]}, unexpected {extra[:4]})"
        )
    for prefix, net in (("student", state.student), ("teacher", state.teacher)):
        params = net.parameters()
        for name, p in params.items():
            arr = records[f"{prefix}.{name}"]
            if arr.shape != p.data.shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {prefix}.{name}: "
                    f"{arr.shape} vs {p.data.shape}"
                )
            p.data = arr.astype(np.float32)
        for bn_name, bn_state in net.bn_states().items():
            bn_state.running_mean = records[f"{prefix}.{bn_name}.running_mean"].astype(
                np.float32
            )
            bn_state.running_var = records[f"{prefix}.{bn_name}.running_var"].astype(
                np.float32
            )
    return state


# -- full runs ---------------------------------------------------------------------

LOSS_CSV_HEADER = (
    "iter,lr,total,seg_sup,bdry_sup,dual,seg_cons,bdry_cons,"
    "lam_seg_t,lam_bdry_t,sup_pixels"
)


@dataclass
class RunRecord:
    out_dir: Path
    final_report: metrics.MetricsReport
    best_iter: int
    best_miou: float
    metric_series: List[Tuple[int, metrics.MetricsReport]]

    @property
    def summary_path(self) -> Path:
        return self.out_dir / "summary.json"


def train_run(exp_cfg, data: Dataset, out_dir) -> RunRecord:
    """Run T iterations with periodic evaluation; persist a full run record."""
    from .config import ExperimentConfig  # local import to avoid a cycle

    assert isinstance(exp_cfg, ExperimentConfig)
    if data.num_classes != exp_cfg.model.num_classes:
        raise DataError(
            f"dataset has {data.num_classes} classes but the model config says "
            f"{exp_cfg.model.num_classes}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(exp_cfg.to_json())

    cfg = exp_cfg.trainer
    split = make_split(data.n_train, cfg.label_fraction, exp_cfg.seed)
    state = init_state(exp_cfg.model, cfg, exp_cfg.seed)
    optimizer = SGD(state.student.parameters(), cfg.momentum, cfg.weight_decay)
    cadence = cfg.cadence()
    with_mf = exp_cfg.model.boundary_channels > 0 and "mf" in exp_cfg.eval.metrics

    best_iter, best_miou = -1, -1.0
    series: List[Tuple[int, metrics.MetricsReport]] = []
    loss_rows = [LOSS_CSV_HEADER]
    metric_rows = ["iter," + metrics.MetricsReport.csv_header()]

    for t in range(cfg.total_iters):
        batch = sample_batch(data, split, cfg, exp_cfg.augment, exp_cfg.seed, t)
        b = run_iteration(
            state, batch, exp_cfg.model, cfg, optimizer, exp_cfg.augment, exp_cfg.seed
        )
        loss_rows.append(
            f"{t},{b['lr']:.8f},{b['total']:.6f},{b['seg_sup']:.6f},"
            f"{b['bdry_sup']:.6f},{b['dual']:.6f},{b['seg_cons']:.6f},"
            f"{b['bdry_cons']:.6f},{b['lam_seg_t']:.6f},{b['lam_bdry_t']:.6f},"
            f"{int(b['sup_pixels'])}"
        )
        done = t + 1
        if done % cadence == 0 or done == cfg.total_iters:
            report = evaluate(
                state.teacher,
                data,
                data.val_indices,
                exp_cfg.eval.band_k,
                with_mf=with_mf,
                boundary_radius=cfg.boundary_radius,
            )
            series.append((done, report))
            metric_rows.append(f"{done}," + report.csv_row())
            if report.miou > best_miou:
                best_iter, best_miou = done, report.miou
                save_checkpoint(out / "best.bmck", state)

    final_report = series[-1][1]
    save_checkpoint(out / "final.bmck", state)
    (out / "losses.csv").write_text("\n".join(loss_rows) + "\n")
    (out / "metrics.csv").write_text("\n".join(metric_rows) + "\n")
    summary = {
        "schema_version": 1,
        "seed": exp_cfg.seed,
        "config": exp_cfg.to_dict(),
        "iterations": cfg.total_iters,
        "final": final_report.to_json_dict(),
        "best": {"iter": best_iter, "miou": round(float(best_miou), 6)},
        "metric_series": [
            {"iter": it, "miou": round(float(r.miou), 6)} for it, r in series
        ],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return RunRecord(
        out_dir=out,
        final_report=final_report,
        best_iter=best_iter,
        best_miou=best_miou,
        metric_series=series,
    )
