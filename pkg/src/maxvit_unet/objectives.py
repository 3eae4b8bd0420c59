"""Segmentation objectives (cross-entropy, soft Dice, their weighted sum) and
hard Dice/IoU metrics.

Logits are ``(C, H, W)`` or ``(B, C, H, W)``; targets are integer class masks of
the matching spatial shape. Pixels equal to ``IGNORE_INDEX`` count nowhere.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError
from .tensor import Tensor, mul, tsum

IGNORE_INDEX = 255
CLASS_AXIS = -3


def _prepare(logits: Tensor, target) -> tuple[np.ndarray, np.ndarray, int]:
    """Validate; return ``(one_hot, valid, C)`` with one_hot shaped like the logits."""
    target = np.asarray(target)
    if logits.ndim not in (3, 4):
        raise ShapeError("logits must be (C, H, W) or (B, C, H, W)", logits.shape)
    c = logits.shape[CLASS_AXIS]
    spatial = logits.shape[:-3] + logits.shape[-2:]
    if target.shape != spatial:
        raise ShapeError("target shape does not match logits", target.shape, logits.shape)
    if not np.issubdtype(target.dtype, np.integer):
        if not np.array_equal(target, np.round(target)):
            raise ValueError("target mask must contain integer class indices")
        target = target.astype(np.int64)
    valid = target != IGNORE_INDEX
    bad = valid & ((target < 0) | (target >= c))
    if bad.any():
        raise ValueError(f"target class {int(target[bad].max())} outside [0, {c})")
    classes = np.arange(c).reshape((c, 1, 1))
    one_hot = (np.expand_dims(target, CLASS_AXIS) == classes) & np.expand_dims(valid, CLASS_AXIS)
    return one_hot.astype(logits.dtype), valid, c


def cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Per-pixel negative log-likelihood of the true class, summed or averaged over counted pixels."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    one_hot, valid, _ = _prepare(logits, target)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("every target pixel is ignored")
    total = -tsum(mul(ops.log_softmax(logits, axis=CLASS_AXIS), one_hot))
    return total if reduction == "sum" else total / float(count)


def dice_scores(logits: Tensor, target, smooth: float = 1.0, include_background: bool = False) -> Tensor:
    """Soft Dice per counted class, ``(2|P*Y| + s) / (|P| + |Y| + s)`` on softmax probabilities.

    Sums run over every counted pixel of every image in the batch.
    """
    one_hot, valid, c = _prepare(logits, target)
    if not valid.any():
        raise ValueError("every target pixel is ignored")
    probs = ops.softmax(logits, axis=CLASS_AXIS)
    probs = mul(probs, np.broadcast_to(np.expand_dims(valid, CLASS_AXIS), probs.shape).astype(probs.dtype))
    axes = tuple(i for i in range(logits.ndim) if i != logits.ndim + CLASS_AXIS)
    inter = tsum(mul(probs, one_hot), axis=axes)
    card = tsum(probs, axis=axes) + Tensor(one_hot.sum(axis=axes), dtype=logits.dtype)
    scores = (inter * 2.0 + smooth) / (card + smooth)
    return scores if include_background else scores[1:]


def dice_loss(logits: Tensor, target, smooth: float = 1.0, include_background: bool = False,
              literal_sum: bool = False) -> Tensor:
    """``1 - mean`` of :func:`dice_scores`; ``literal_sum`` uses the class sum instead of the mean."""
    if logits.shape[CLASS_AXIS] < 2:
        raise ShapeError("dice loss needs at least two classes", logits.shape)
    scores = dice_scores(logits, target, smooth, include_background)
    agg = tsum(scores) if literal_sum else tsum(scores) / float(scores.size)
    return 1.0 - agg


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    dice: float = 3.0

    def __post_init__(self):
        if self.ce < 0 or self.dice < 0:
            raise ValueError("loss weights must be non-negative")


def composite_loss(logits: Tensor, target, weights: LossWeights = LossWeights(), smooth: float = 1.0,
                   return_parts: bool = False):
    """``weights.ce * CE + weights.dice * DiceLoss``; optionally also returns both parts."""
    ce = cross_entropy(logits, target)
    dl = dice_loss(logits, target, smooth)
    total = ce * weights.ce + dl * weights.dice
    return (total, ce, dl) if return_parts else total


# ---------------------------------------------------------------- metrics --


@dataclass
class SegmentationCounts:
    """Per-class pixel counts; merging is associative and commutative."""

    num_classes: int
    intersection: np.ndarray = field(default=None)
    predicted: np.ndarray = field(default=None)
    actual: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("intersection", "predicted", "actual"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def update(self, pred, target) -> "SegmentationCounts":
        pred, target = np.asarray(pred), np.asarray(target)
        if pred.shape != target.shape:
            raise ShapeError("prediction and target masks differ in shape", pred.shape, target.shape)
        valid = target != IGNORE_INDEX
        p, t = pred[valid].astype(np.int64), target[valid].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.num_classes or t.min() < 0 or t.max() >= self.num_classes):
            raise ValueError(f"mask values outside [0, {self.num_classes})")
        n = self.num_classes
        self.predicted += np.bincount(p, minlength=n)
        self.actual += np.bincount(t, minlength=n)
        self.intersection += np.bincount(t[p == t], minlength=n)
        return self

    def __add__(self, other: "SegmentationCounts") -> "SegmentationCounts":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge counts with different class counts")
        return SegmentationCounts(self.num_classes, self.intersection + other.intersection,
                                  self.predicted + other.predicted, self.actual + other.actual)

    def dice(self) -> np.ndarray:
        """Per-class Dice; NaN for classes absent from both masks."""
        denom = self.predicted + self.actual
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, 2.0 * self.intersection / denom, np.nan)

    def iou(self) -> np.ndarray:
        union = self.predicted + self.actual - self.intersection
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.intersection / union, np.nan)

    def summary(self) -> dict:
        dice, iou = self.dice(), self.iou()

        def mean(x):
            x = x[~np.isnan(x)]
            return float(x.mean()) if x.size else float("nan")

        return {
            "dice": [float(v) for v in dice],
            "iou": [float(v) for v in iou],
            "mDice": mean(dice),
            "mIoU": mean(iou),
            "mDice_fg": mean(dice[1:]),
            "mIoU_fg": mean(iou[1:]),
            "pixels": [int(v) for v in self.actual],
        }


def dice_metric(pred, target, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class hard Dice and its mean over classes present in either mask."""
    s = SegmentationCounts(num_classes).update(pred, target).summary()
    return np.array(s["dice"]), s["mDice"]


def iou_metric(pred, target, num_classes: int) -> tuple[np.ndarray, float]:
    s = SegmentationCounts(num_classes).update(pred, target).summary()
    return np.array(s["iou"]), s["mIoU"]


def predict_mask(logits) -> np.ndarray:
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return data.argmax(axis=CLASS_AXIS)


def format_report(summary: dict) -> str:
    """Line-oriented text report of a :meth:`SegmentationCounts.summary`."""
    lines = ["class  dice    iou     pixels"]
    for i, (d, j, n) in enumerate(zip(summary["dice"], summary["iou"], summary["pixels"])):
        lines.append(f"{i:<6d} {d:.4f}  {j:.4f}  {n}")
    lines.append(f"mean   {summary['mDice']:.4f}  {summary['mIoU']:.4f}  (all classes)")
    lines.append(f"mean   {summary['mDice_fg']:.4f}  {summary['mIoU_fg']:.4f}  (without background)")
    return "\n".join(lines)


def report_items(summary: dict) -> dict[str, float | int]:
    """Flat key-value form (``dice.1``, ``iou.1``, ``pixels.1``, ``mDice``, ...)."""
    out: dict[str, float | int] = {}
    for key in ("dice", "iou", "pixels"):
        for i, v in enumerate(summary[key]):
            out[f"{key}.{i}"] = v
    for key in ("mDice", "mIoU", "mDice_fg", "mIoU_fg"):
        out[key] = summary[key]
    return out
