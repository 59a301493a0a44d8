"""Class-weighted cross entropy, L2 penalty, label downsampling and IoU metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import log_softmax_channels

DEFAULT_C = 1.02


@dataclass
class ClassWeightTable:
    weights: np.ndarray
    c: float
    source_histogram: np.ndarray
    ignore_index: Optional[int] = None


def compute_class_weights(histogram: Sequence[int], c: float = DEFAULT_C,
                          ignore_index: Optional[int] = None) -> ClassWeightTable:
    """Inverse-log frequency weights ``1 / ln(c + p_class)``; the ignore class gets 0."""
    hist = np.asarray(histogram, dtype=np.int64)
    if hist.ndim != 1 or hist.size == 0 or np.any(hist < 0):
        raise ConfigError("histogram must be a non-empty vector of non-negative counts")
    if not c > 1:
        raise ConfigError(f"class weight constant c must exceed 1, got {c}")
    valid = np.ones(hist.size, bool)
    if ignore_index is not None:
        valid[ignore_index] = False
    total = int(hist[valid].sum())
    if total == 0:
        raise ConfigError("histogram has no non-ignored pixels")
    p = np.where(valid, hist / total, 0.0)
    weights = np.where(valid, 1.0 / np.log(c + p), 0.0)
    return ClassWeightTable(weights, c, hist, ignore_index)


def _weight_vector(weights, n_classes: int) -> np.ndarray:
    w = weights.weights if isinstance(weights, ClassWeightTable) else np.asarray(weights, dtype=np.float64)
    if w.shape != (n_classes,):
        raise ShapeError(f"expected {n_classes} class weights, got shape {w.shape}")
    return w


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights, ignore_index: Optional[int] = None):
    """Return ``(loss, grad_logits)``.

    The loss is the class-weighted mean of per-pixel negative log-likelihoods,
    normalized by the summed weights of the contributing pixels.
    """
    n, k, h, w = logits.shape
    if labels.shape != (n, 1, h, w):
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    wv = _weight_vector(weights, k)
    if ignore_index is None and isinstance(weights, ClassWeightTable):
        ignore_index = weights.ignore_index
    y = labels[:, 0].astype(np.int64)
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ShapeError(f"label ids out of range [0, {k})")
    pix_w = wv[y]
    if ignore_index is not None:
        pix_w = np.where(y == ignore_index, 0.0, pix_w)
    total_w = pix_w.sum()
    if total_w <= 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax_channels(logits.astype(np.float64))
    picked = np.take_along_axis(logp, y[:, None], axis=1)[:, 0]
    loss = float(-(pix_w * picked).sum() / total_w)
    grad = np.exp(logp)
    np.put_along_axis(grad, y[:, None], np.take_along_axis(grad, y[:, None], axis=1) - 1.0, axis=1)
    grad *= (pix_w / total_w)[:, None]
    return loss, grad.astype(logits.dtype)


def is_kernel(key: str) -> bool:
    return key.endswith(".weight")


def l2_penalty(params: Mapping[str, np.ndarray], decay: float):
    """``decay / 2 * sum ||kernel||^2`` over convolution kernels, and its gradient."""
    penalty = 0.0
    grads = {}
    for key, value in params.items():
        if is_kernel(key):
            penalty += float(np.sum(value.astype(np.float64) ** 2))
            grads[key] = (decay * value).astype(value.dtype)
    return 0.5 * decay * penalty, grads


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest (top-left) subsampling of a ``(n, 1, h, w)`` label map."""
    if factor < 1:
        raise ConfigError("downsample factor must be >= 1")
    h, w = labels.shape[2:]
    if h % factor or w % factor:
        raise ShapeError(f"label size {h}x{w} not divisible by {factor}")
    return np.ascontiguousarray(labels[:, :, ::factor, ::factor])


def upsample_nearest(labels: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return labels
    return labels.repeat(factor, axis=2).repeat(factor, axis=3)


def predict_labels(logits: np.ndarray, ignore_index: Optional[int] = None) -> np.ndarray:
    """Argmax over class channels, never predicting the ignore class."""
    scores = logits
    if ignore_index is not None:
        scores = logits.copy()
        scores[:, ignore_index] = -np.inf
    return scores.argmax(axis=1)[:, None].astype(np.int64)


class ConfusionMatrix:
    """Ground truth rows, predictions columns, over the non-ignored class ids."""

    def __init__(self, n_classes: int, ignore_index: Optional[int] = None):
        self.n_classes = n_classes
        self.ignore_index = ignore_index
        self.class_ids = [i for i in range(n_classes) if i != ignore_index]
        self._index = np.full(n_classes, -1, dtype=np.int64)
        self._index[self.class_ids] = np.arange(len(self.class_ids))
        self.matrix = np.zeros((len(self.class_ids),) * 2, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def update(self, pred: np.ndarray, truth: np.ndarray) -> "ConfusionMatrix":
        if pred.shape != truth.shape:
            raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
        t = truth.reshape(-1).astype(np.int64)
        p = pred.reshape(-1).astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= self.n_classes or p.min() < 0 or p.max() >= self.n_classes):
            raise ShapeError("label ids out of range")
        keep = t != self.ignore_index if self.ignore_index is not None else np.ones(t.size, bool)
        ti, pi = self._index[t[keep]], self._index[p[keep]]
        if np.any(pi < 0):
            raise ShapeError("predictions contain the ignore class")
        m = len(self.class_ids)
        self.matrix += np.bincount(ti * m + pi, minlength=m * m).reshape(m, m)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.class_ids != self.class_ids:
            raise ShapeError("cannot merge confusion matrices over different classes")
        out = ConfusionMatrix(self.n_classes, self.ignore_index)
        out.matrix = self.matrix + other.matrix
        return out


def confusion_update(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    return cm.update(pred, truth)


def _iou(matrix: np.ndarray) -> List[Optional[float]]:
    inter = np.diag(matrix)
    union = matrix.sum(axis=0) + matrix.sum(axis=1) - inter
    return [float(i) / float(u) if u > 0 else None for i, u in zip(inter, union)]


def _mean(values) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


@dataclass
class IoUReport:
    class_names: List[str]
    class_iou: List[Optional[float]]
    miou: Optional[float]
    category_names: List[str] = field(default_factory=list)
    category_iou: List[Optional[float]] = field(default_factory=list)
    category_miou: Optional[float] = None
    pixels: int = 0

    def format_table(self) -> str:
        def fmt(v):
            return "   n/a" if v is None else f"{100 * v:6.1f}"

        width = max([len(n) for n in self.class_names + self.category_names] + [8])
        lines = [f"{'class':<{width}}  IoU(%)", "-" * (width + 8)]
        lines += [f"{n:<{width}}  {fmt(v)}" for n, v in zip(self.class_names, self.class_iou)]
        lines.append(f"{'mIoU':<{width}}  {fmt(self.miou)}")
        if self.category_names:
            lines += ["", f"{'category':<{width}}  IoU(%)", "-" * (width + 8)]
            lines += [f"{n:<{width}}  {fmt(v)}" for n, v in zip(self.category_names, self.category_iou)]
            lines.append(f"{'mIoU':<{width}}  {fmt(self.category_miou)}")
        lines.append(f"pixels evaluated: {self.pixels}")
        return "\n".join(lines)

    def format_kv(self) -> str:
        def fmt(v):
            return "undefined" if v is None else f"{v:.6f}"

        lines = [f"class_iou.{n.replace(' ', '_')}={fmt(v)}" for n, v in zip(self.class_names, self.class_iou)]
        lines.append(f"miou={fmt(self.miou)}")
        lines += [f"category_iou.{n.replace(' ', '_')}={fmt(v)}"
                  for n, v in zip(self.category_names, self.category_iou)]
        lines.append(f"category_miou={fmt(self.category_miou)}")
        lines.append(f"pixels={self.pixels}")
        return "\n".join(lines)


def iou_report(cm: ConfusionMatrix, categories: Optional[Mapping[int, str]] = None,
               class_names: Optional[Sequence[str]] = None) -> IoUReport:
    """Per-class IoU, mIoU over defined classes, and IoU of the category-collapsed matrix."""
    names = [class_names[i] if class_names else str(i) for i in cm.class_ids]
    class_iou = _iou(cm.matrix)
    report = IoUReport(names, class_iou, _mean(class_iou), pixels=cm.total)
    if categories:
        missing = [i for i in cm.class_ids if i not in categories]
        if missing:
            raise ConfigError(f"category map does not cover classes {missing}")
        cat_names: List[str] = []
        for i in cm.class_ids:
            if categories[i] not in cat_names:
                cat_names.append(categories[i])
        onehot = np.zeros((len(cm.class_ids), len(cat_names)), dtype=np.int64)
        for row, i in enumerate(cm.class_ids):
            onehot[row, cat_names.index(categories[i])] = 1
        collapsed = onehot.T @ cm.matrix @ onehot
        report.category_names = cat_names
        report.category_iou = _iou(collapsed)
        report.category_miou = _mean(report.category_iou)
    return report
