"""Dice/BCE training loss and the per-image DSC, mIoU and accuracy metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, clip, log, mul, sub
from .tensor import sum as tsum

PROB_EPS = 1e-7


def dice_bce_loss(pred: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    """``0.5 * BCE + 0.5 * (1 - soft Dice)`` averaged over the whole batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    p = clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    t = target.data
    ll = mul(log(p), t) + mul(log(1.0 - p), 1.0 - t)
    bce = -tsum(ll) * (1.0 / p.size)
    inter = tsum(mul(pred, t))
    dice = (2.0 * inter + smooth) / (tsum(pred) + (float(t.sum()) + smooth))
    return 0.5 * bce + 0.5 * sub(1.0, dice)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_masks(cls, pred, target) -> "ConfusionCounts":
        p = np.asarray(pred).astype(bool)
        t = np.asarray(target).astype(bool)
        if p.shape != t.shape:
            raise ShapeError(f"mask shapes {p.shape} and {t.shape} differ")
        tp = int(np.count_nonzero(p & t))
        fp = int(np.count_nonzero(p & ~t))
        fn = int(np.count_nonzero(~p & t))
        return cls(tp, fp, fn, p.size - tp - fp - fn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _ratio(num: int, den: int) -> float:
    # empty class/mask convention: nothing to find and nothing found scores 1
    return 1.0 if den == 0 else num / den


def dsc(pred_mask, target_mask) -> float:
    c = ConfusionCounts.from_masks(pred_mask, target_mask)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou_foreground(pred_mask, target_mask) -> float:
    c = ConfusionCounts.from_masks(pred_mask, target_mask)
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def miou(pred_mask, target_mask) -> float:
    """Mean IoU over background and foreground."""
    c = ConfusionCounts.from_masks(pred_mask, target_mask)
    fg = _ratio(c.tp, c.tp + c.fp + c.fn)
    bg = _ratio(c.tn, c.tn + c.fn + c.fp)
    return 0.5 * (fg + bg)


def accuracy(pred_mask, target_mask) -> float:
    c = ConfusionCounts.from_masks(pred_mask, target_mask)
    return (c.tp + c.tn) / c.total


METRICS = ("dsc", "miou", "acc")


@dataclass
class EvalReport:
    rows: list  # (sample_id, dsc, miou, acc, iou_fg)
    threshold: float

    @property
    def summary(self) -> dict[str, float]:
        arr = np.array([r[1:] for r in self.rows], dtype=np.float64)
        means = arr.mean(axis=0)
        return {"dsc": float(means[0]), "miou": float(means[1]), "acc": float(means[2]),
                "iou_fg": float(means[3]), "n": len(self.rows)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "dsc", "miou", "acc"])
        for sid, d, m, a, _ in self.rows:
            w.writerow([sid, f"{d:.6f}", f"{m:.6f}", f"{a:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'sample_id':<24} {'DSC':>8} {'mIoU':>8} {'Acc':>8}"]
        for sid, d, m, a, _ in self.rows:
            lines.append(f"{sid:<24} {d:8.4f} {m:8.4f} {a:8.4f}")
        s = self.summary
        lines.append(f"{'mean (n=%d)' % s['n']:<24} {s['dsc']:8.4f} {s['miou']:8.4f} "
                     f"{s['acc']:8.4f}")
        lines.append(f"foreground-only IoU (mean): {s['iou_fg']:.4f}")
        lines.append(f"threshold {self.threshold}; per-image macro average; an empty "
                     "prediction on an empty mask scores DSC 1 and an absent class IoU 1.")
        return "\n".join(lines)


def evaluate_set(model: Callable, samples: Sequence, threshold: float = 0.5,
                 batch_size: int = 8) -> EvalReport:
    """Threshold ``model`` outputs and average per-image metrics over ``samples``.

    ``model`` maps an ``N x 1 x H x W`` tensor to probabilities of the same
    shape; samples need ``image``, ``mask`` and ``id`` attributes.
    """
    if not samples:
        raise ValueError("evaluate_set needs at least one sample")
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        x = Tensor(np.stack([s.image for s in chunk])[:, None].astype(np.float32))
        prob = model(x).data[:, 0]
        for s, pr in zip(chunk, prob):
            pm = pr >= threshold
            tm = np.asarray(s.mask) > 0
            rows.append((s.id, dsc(pm, tm), miou(pm, tm), accuracy(pm, tm),
                         iou_foreground(pm, tm)))
    return EvalReport(rows, threshold)
