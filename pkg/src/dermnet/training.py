"""Losses, SGD with per-group learning rates, training loops and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import imaging
from .datasets import CLASSES, Manifest, ManifestError, class_weights, require_masks
from .metrics import MetricsReport, SegmentationScores, classification_report
from .recnet import (
    Phase,
    RecConfig,
    RecModel,
    backbone_features,
    build_recnet,
    rec_logits,
    set_phase,
)
from .segnet import SegModel, predict_mask, seg_forward
from .tensor import Parameter, Tape, Tensor, apply_op, dense, sigmoid
from .tensor.checkpoint import CheckpointTensor
from .tensor.ops import _sigmoid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_head: float = 1e-2
    lr_finetune: Optional[float] = None  # defaults to lr_head / 10
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    class_weighting: bool = True
    loss: str = "bce"
    max_steps: Optional[int] = None

    def __post_init__(self):
        if self.lr_head <= 0 or (self.lr_finetune is not None and self.lr_finetune <= 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("bce", "bce_plus_dice"):
            raise ValueError(f"unknown segmentation loss {self.loss!r}")

    @property
    def finetune_rate(self) -> float:
        return self.lr_finetune if self.lr_finetune is not None else self.lr_head / 10


# ---------------------------------------------------------------- losses

def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    y = np.asarray(target, dtype=logits.dtype)
    if y.shape != logits.shape:
        if y.size != logits.size:
            raise ValueError(f"bce_loss: logits {logits.shape} vs target {y.shape}")
        y = y.reshape(logits.shape)
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(per.mean(), dtype=z.dtype)

    def back(g, needs):
        return ((_sigmoid(z) - y) * (g / z.size),)

    return apply_op(out, (logits,), back)


def dice_loss(logits: Tensor, target: np.ndarray, eps: float = 1.0) -> Tensor:
    y = np.asarray(target, dtype=logits.dtype).reshape(logits.shape)
    p = sigmoid(logits)
    inter = (p * y).sum()
    return 1 - (2 * inter + eps) / (p.sum() + float(y.sum()) + eps)


def cross_entropy(logits: Tensor, labels: Sequence[int], weights: Optional[Sequence[float]] = None) -> Tensor:
    """Weighted mean of -w[y] log softmax(z)[y], fused with the softmax.

    The mean divides by the batch size, not by the weight sum.
    """
    z = logits.data
    n, c = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    w = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    wy = w[labels].astype(z.dtype)
    out = np.asarray(-(wy * logp[np.arange(n), labels]).sum() / n, dtype=z.dtype)

    def back(g, needs):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1
        return (grad * (wy[:, None] * (g / n)),)

    return apply_op(out, (logits,), back)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    momentum: float = 0.9
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Iterable[Parameter], state: OptimizerState, lr_by_group: Mapping[str, float]) -> None:
    """v <- momentum*v + g; p <- p - lr(group)*v; then clear gradients.

    Frozen parameters are never written and lose any momentum buffer.
    """
    params = list(params)
    for p in params:
        if not p.trainable and p.name in state.buffers:
            del state.buffers[p.name]
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            raise ValueError(f"trainable parameter {p.name} has no gradient")
        v = state.buffers.get(p.name)
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers[p.name] = v
        p.tensor.data = (p.tensor.data - lr_by_group[p.group] * v).astype(p.tensor.dtype)
    for p in params:
        p.tensor.grad = None


# ---------------------------------------------------------------- seeding

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    derived = splitmix64(splitmix64(seed & _MASK64) ^ epoch)
    return np.random.default_rng(derived).permutation(n)


# ---------------------------------------------------------------- history

@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.epochs and record["epoch"] <= self.epochs[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        self.epochs.append(record)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_text(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.epochs)


EpochCallback = Callable[[dict], None]


# ---------------------------------------------------------------- data assembly

def _stack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack(arrays).astype(np.float32)


def load_seg_arrays(manifest: Manifest, records) -> tuple[np.ndarray, np.ndarray]:
    """Normalized [N,3,150,150] inputs and nearest-resized [N,150,150] masks."""
    size = imaging.INPUT_SIZE
    xs, ys = [], []
    for rec in records:
        xs.append(imaging.to_input(manifest.load_image(rec)))
        ys.append(imaging.resize_nearest(manifest.load_mask(rec), size, size))
    return _stack(xs), np.stack(ys)


def _crop_input(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return imaging.to_input(imaging.crop_from_mask(img, mask))


def load_cls_arrays(manifest: Manifest, records, seg: SegModel, use_truth_masks: bool):
    """Full-image and crop inputs plus labels.

    Crops come from the record's ground-truth mask when ``use_truth_masks``
    and a mask exists, otherwise from the segmentation network.
    """
    full, crop, labels = [], [], []
    for rec in records:
        img = manifest.load_image(rec)
        mask = manifest.load_mask(rec) if (use_truth_masks and rec.mask is not None) else predict_mask(seg, img)
        full.append(imaging.to_input(img))
        crop.append(_crop_input(img, mask))
        labels.append(rec.label_index)
    return _stack(full), _stack(crop), np.asarray(labels, dtype=np.int64)


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _seg_predict_small(model: SegModel, x: np.ndarray, batch_size: int) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        out.append(seg_forward(model, Tensor(x[i:i + batch_size])).data[:, 0] >= 0)
    return np.concatenate(out) if out else np.zeros((0,) + x.shape[2:], bool)


# ---------------------------------------------------------------- segmentation

def train_seg(model: SegModel, manifest: Manifest, cfg: TrainConfig,
              on_epoch: Optional[EpochCallback] = None) -> History:
    """Mini-batch SGD on the train split; the best validation-Jaccard weights are kept."""
    train = manifest.split("train")
    require_masks(train)
    if not train:
        raise ManifestError("no training records")
    val = [r for r in manifest.split("val") if r.mask is not None]
    history = History()
    if cfg.epochs <= 0:
        return history

    x_train, y_train = load_seg_arrays(manifest, train)
    x_val, y_val = load_seg_arrays(manifest, val) if val else (None, None)
    state = OptimizerState(cfg.momentum)
    lrs = {"seg": cfg.lr_head}
    best, best_state = -1.0, None
    steps = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(epoch_order(cfg.seed, epoch, len(train)), cfg.batch_size):
            with Tape() as tape:
                logits = seg_forward(model, Tensor(x_train[idx]))
                target = y_train[idx][:, None]
                loss = bce_loss(logits, target)
                if cfg.loss == "bce_plus_dice":
                    loss = loss + dice_loss(logits, target)
            tape.backward(loss)
            sgd_step(model.params, state, lrs)
            losses.append(loss.item())
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        record = {"epoch": epoch, "loss": float(np.mean(losses))}
        if x_val is not None:
            scores = SegmentationScores()
            for pred, truth in zip(_seg_predict_small(model, x_val, cfg.batch_size), y_val):
                scores.add(pred, truth)
            record["val_jaccard"] = scores.mean_jaccard
            record["val_dice"] = scores.mean_dice
            if scores.mean_jaccard > best:
                best, best_state = scores.mean_jaccard, model.params.snapshot()
        history.append(record)
        log.info("seg epoch %d loss %.4f val_jaccard %s", epoch, record["loss"], record.get("val_jaccard"))
        if on_epoch is not None:
            on_epoch(record)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if best_state is not None:
        model.params.restore(best_state)
    return history


def evaluate_seg(model: SegModel, manifest: Manifest, split: str) -> MetricsReport:
    records = manifest.split(split)
    if not records:
        raise ManifestError(f"split {split!r} is empty")
    require_masks(records)
    report = MetricsReport(split, segmentation=SegmentationScores())
    for rec in records:
        img = manifest.load_image(rec)
        report.segmentation.add(predict_mask(model, img), manifest.load_mask(rec))
        report.images.append(rec.image)
    return report


# ---------------------------------------------------------------- classification

def _cls_lrs(cfg: TrainConfig) -> dict[str, float]:
    return {"head": cfg.lr_head, "backbone_full": cfg.finetune_rate, "backbone_crop": cfg.finetune_rate}


def _predict_classes(rec: RecModel, full: np.ndarray, crop: np.ndarray, batch_size: int = 16) -> np.ndarray:
    preds = []
    for i in range(0, len(full), batch_size):
        z = rec_logits(rec, Tensor(full[i:i + batch_size]), Tensor(crop[i:i + batch_size])).data
        preds.append(np.argmax(z, axis=1))
    return np.concatenate(preds)


def train_cls(rec: RecModel, seg: SegModel, manifest: Manifest, cfg: TrainConfig, phase: Phase,
              on_epoch: Optional[EpochCallback] = None) -> History:
    """Train the classifier in one phase.

    Training crops use ground-truth masks where available; validation crops
    always come from the segmentation network, as at inference time.
    """
    set_phase(rec, phase)
    train = [r for r in manifest.split("train") if r.label is not None]
    if not train:
        raise ManifestError("no labelled training records")
    val = [r for r in manifest.split("val") if r.label is not None]
    weights = class_weights(manifest) if cfg.class_weighting else np.ones(len(CLASSES))
    history = History()
    if cfg.epochs <= 0:
        return history

    f_train, c_train, y_train = load_cls_arrays(manifest, train, seg, use_truth_masks=True)
    f_val, c_val, y_val = load_cls_arrays(manifest, val, seg, use_truth_masks=False) if val else (None, None, None)
    state = OptimizerState(cfg.momentum)
    lrs = _cls_lrs(cfg)
    best, best_state = -1.0, None
    steps = 0
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(epoch_order(cfg.seed, epoch, len(train)), cfg.batch_size):
            with Tape() as tape:
                loss = cross_entropy(rec_logits(rec, Tensor(f_train[idx]), Tensor(c_train[idx])), y_train[idx], weights)
            tape.backward(loss)
            sgd_step(rec.params, state, lrs)
            losses.append(loss.item())
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "phase": phase.value}
        if f_val is not None:
            acc = float(np.mean(_predict_classes(rec, f_val, c_val) == y_val))
            record["val_accuracy"] = acc
            if acc > best:
                best, best_state = acc, rec.params.snapshot()
        history.append(record)
        log.info("cls epoch %d loss %.4f val_accuracy %s", epoch, record["loss"], record.get("val_accuracy"))
        if on_epoch is not None:
            on_epoch(record)
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
    if best_state is not None:
        rec.params.restore(best_state)
    return history


def evaluate_cls(rec: RecModel, seg: SegModel, manifest: Manifest, split: str) -> MetricsReport:
    records = [r for r in manifest.split(split) if r.label is not None]
    if not records:
        raise ManifestError(f"split {split!r} has no labelled records")
    full, crop, labels = load_cls_arrays(manifest, records, seg, use_truth_masks=False)
    preds = _predict_classes(rec, full, crop)
    report = MetricsReport(split, classification=classification_report(preds, labels))
    report.images = [r.image for r in records]
    return report


# ---------------------------------------------------------------- backbone pretraining

def pretrain_backbone(manifest: Manifest, rec_cfg: RecConfig, cfg: TrainConfig,
                      on_epoch: Optional[EpochCallback] = None) -> list[CheckpointTensor]:
    """Train one backbone plus a throwaway linear classifier on full images.

    Stands in for ImageNet pretraining: the returned backbone tensors (group
    backbone_full) are meant for :func:`load_backbone_checkpoint`.
    """
    model = build_recnet(replace(rec_cfg, share_backbones=True), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    fdim = rec_cfg.feature_dim
    probe = Parameter("head.proxy.w", Tensor(rng.standard_normal((fdim, len(CLASSES))) * np.sqrt(1 / fdim), dtype=np.float32), "head")
    probe_b = Parameter("head.proxy.b", Tensor(np.zeros(len(CLASSES), np.float32)), "head")
    backbone = model.backbone_params("backbone_full")
    for p in backbone:
        p.set_trainable(True)
    train = [r for r in manifest.split("train") if r.label is not None]
    if not train:
        raise ManifestError("no labelled training records")
    full = _stack([imaging.to_input(manifest.load_image(r)) for r in train])
    labels = np.asarray([r.label_index for r in train])
    weights = class_weights(manifest) if cfg.class_weighting else None
    params = backbone + [probe, probe_b]
    state = OptimizerState(cfg.momentum)
    lrs = {"head": cfg.lr_head, "backbone_full": cfg.lr_head}
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(epoch_order(cfg.seed, epoch, len(train)), cfg.batch_size):
            with Tape() as tape:
                feats = backbone_features(model, Tensor(full[idx]), "backbone_full")
                loss = cross_entropy(dense(feats, probe.tensor, probe_b.tensor), labels[idx], weights)
            tape.backward(loss)
            sgd_step(params, state, lrs)
            losses.append(loss.item())
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "phase": "pretrain"}
        log.info("pretrain epoch %d loss %.4f", epoch, record["loss"])
        if on_epoch is not None:
            on_epoch(record)
    return [CheckpointTensor(p.name, p.group, p.data.copy()) for p in backbone]
