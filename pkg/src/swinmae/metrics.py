"""Segmentation metrics: per-class confusion counts, Dice / pixel accuracy /
IoU (one-vs-rest, macro-averaged over foreground classes), and the exact
symmetric Hausdorff distance between pixel sets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .tensor import TensorError


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred, gt, cls, num_classes):
    """Pixel tallies treating class `cls` as positive."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise TensorError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for arr, nm in ((pred, "pred"), (gt, "gt")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise TensorError(f"{nm}: label out of range [0, {num_classes})")
    p = pred == cls
    g = gt == cls
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        fn=int(np.sum(~p & g)),
        tn=int(np.sum(~p & ~g)),
    )


def _safe(num, den, absent):
    if den == 0:
        return 1.0 if absent else 0.0
    return num / den


def area_metrics(counts_per_class):
    """{'dsc','mpa','miou'} in percent, macro-averaged over foreground classes.

    `counts_per_class` maps class id -> ConfusionCounts; class 0 (background)
    is excluded from the average. A class absent in both prediction and
    ground truth scores 1.0 by convention.
    """
    fg = [c for c in sorted(counts_per_class) if c != 0]
    if not fg:
        raise TensorError("no foreground classes")
    dsc, mpa, miou = [], [], []
    for c in fg:
        cc = counts_per_class[c]
        absent = cc.tp == 0 and cc.fp == 0 and cc.fn == 0
        dsc.append(_safe(2 * cc.tp, cc.fp + 2 * cc.tp + cc.fn, absent))
        mpa.append((cc.tp + cc.tn) / cc.total)
        miou.append(_safe(cc.tp, cc.fn + cc.tp + cc.fp, absent))
    return {
        "dsc": 100.0 * float(np.mean(dsc)),
        "mpa": 100.0 * float(np.mean(mpa)),
        "miou": 100.0 * float(np.mean(miou)),
    }


def directed_hausdorff(a, b):
    """max over a of min over b of Euclidean distance."""
    d = cdist(a, b)
    return float(d.min(axis=1).max())


def hausdorff(a, b):
    """Symmetric Hausdorff distance between two nonempty (row, col) sets."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if a.size == 0 or b.size == 0:
        raise TensorError("hausdorff: point sets must be nonempty")
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def hausdorff_per_class(pred, gt, num_classes, warn=None):
    """Mean Hausdorff over foreground classes present in both maps.

    Classes present on only one side are excluded with a warning; returns
    None when no class is comparable.
    """
    values = []
    for c in range(1, num_classes):
        pa = np.argwhere(pred == c)
        ga = np.argwhere(gt == c)
        if len(pa) == 0 and len(ga) == 0:
            continue
        if len(pa) == 0 or len(ga) == 0:
            if warn:
                warn(f"hausdorff undefined for class {c}: one side empty")
            continue
        values.append(hausdorff(pa, ga))
    return float(np.mean(values)) if values else None
