"""Overlap scores, segmentation losses and voxel classification metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import atomic_write
from .errors import ShapeError
from .tensor import Tensor, as_tensor, clip, log

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0
CLASS_NAMES = ("WT", "TC", "ET")
METRIC_NAMES = ("dice", "jaccard", "accuracy", "precision", "recall", "f1")
CSV_COLUMNS = ("model", "phase", "volume_id", "class") + METRIC_NAMES


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


# -- hard and soft overlap scores ------------------------------------------

def dice_score(pred, truth) -> float:
    """2|P & G| / (|P| + |G|) on binary masks; two empty masks score 1."""
    pred, truth = _pair(pred, truth)
    p = pred.astype(bool)
    g = truth.astype(bool)
    inter = np.count_nonzero(p & g)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    return 1.0 if total == 0 else 2.0 * inter / total


def dice_score_soft(probabilities, truth) -> float:
    p, g = _pair(probabilities, truth)
    p = p.astype(np.float64)
    g = g.astype(np.float64)
    total = p.sum() + g.sum()
    return 1.0 if total == 0 else float(2.0 * (p * g).sum() / total)


def jaccard_score(pred, truth) -> float:
    """|G & P| / |G | P|; two empty masks score 1."""
    pred, truth = _pair(pred, truth)
    p = pred.astype(bool)
    g = truth.astype(bool)
    union = np.count_nonzero(p | g)
    return 1.0 if union == 0 else np.count_nonzero(p & g) / union


# -- differentiable losses --------------------------------------------------

def _reduce_axes(t: Tensor, per_channel: bool):
    if per_channel:
        if t.ndim < 2:
            raise ShapeError("per-channel reduction needs a channel axis at position 1")
        return (0,) + tuple(range(2, t.ndim))
    return None


def dice_loss(probabilities, truth, smooth: float = DICE_SMOOTH, per_channel: bool = False) -> Tensor:
    """1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s).

    With ``per_channel`` the ratio is formed separately for each class channel
    (axis 1, pooled over batch and voxels) and the losses are averaged.
    """
    p = as_tensor(probabilities)
    g = as_tensor(truth, like=p)
    if p.shape != g.shape:
        raise ShapeError(f"probabilities {p.shape} vs truth {g.shape}")
    axes = _reduce_axes(p, per_channel)
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes)
    ratio = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - ratio.mean()


def bce_loss(probabilities, truth, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy over every voxel and channel, with p clipped to [eps, 1 - eps]."""
    p = as_tensor(probabilities)
    g = as_tensor(truth, like=p)
    if p.shape != g.shape:
        raise ShapeError(f"probabilities {p.shape} vs truth {g.shape}")
    pc = clip(p, eps, 1.0 - eps)
    ll = g * log(pc) + (1.0 - g) * log(1.0 - pc)
    return -ll.mean()


def bce_dice_loss(probabilities, truth, per_channel: bool = False) -> Tensor:
    p = as_tensor(probabilities)
    return bce_loss(p, truth) + dice_loss(p, truth, per_channel=per_channel)


# -- confusion-count metrics -------------------------------------------------

@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred, truth) -> ConfusionCounts:
    pred, truth = _pair(pred, truth)
    p = pred.astype(bool)
    g = truth.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


@dataclass
class ClassScores:
    dice: float
    jaccard: float
    accuracy: float
    precision: float
    recall: float
    f1: float
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def scores_from_counts(c: ConfusionCounts) -> ClassScores:
    """Undefined precision/recall (0/0) are reported as 0 and flagged; f1 is 0 if either is 0."""
    flags = []
    if c.tp + c.fp == 0:
        precision = 0.0
        flags.append("precision-undefined")
    else:
        precision = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        recall = 0.0
        flags.append("recall-undefined")
    else:
        recall = c.tp / (c.tp + c.fn)
    f1 = 0.0 if precision == 0 or recall == 0 else 2 * precision * recall / (precision + recall)
    dsum = 2 * c.tp + c.fp + c.fn
    dice = 1.0 if dsum == 0 else 2 * c.tp / dsum
    union = c.tp + c.fp + c.fn
    jaccard = 1.0 if union == 0 else c.tp / union
    accuracy = (c.tp + c.tn) / c.total if c.total else 1.0
    return ClassScores(dice, jaccard, accuracy, precision, recall, f1, flags)


def classification_metrics(pred, truth) -> ClassScores:
    return scores_from_counts(confusion_counts(pred, truth))


@dataclass
class ScoreReport:
    classes: dict[str, ClassScores]

    def mean(self) -> dict[str, float]:
        return {m: float(np.mean([getattr(s, m) for s in self.classes.values()])) for m in METRIC_NAMES}

    def __getitem__(self, name: str) -> ClassScores:
        return self.classes[name]


def per_class_report(prediction, truth, class_names: Sequence[str] = CLASS_NAMES) -> ScoreReport:
    """Score each class channel of one volume independently.

    ``prediction`` is a binary mask (C x D x H x W) or a ``Prediction`` whose
    ``binary_mask`` holds a single-volume batch.
    """
    mask = getattr(prediction, "binary_mask", prediction)
    mask = np.asarray(mask)
    truth = np.asarray(truth)
    if mask.ndim == truth.ndim + 1 and mask.shape[0] == 1:
        mask = mask[0]
    if truth.ndim == mask.ndim + 1 and truth.shape[0] == 1:
        truth = truth[0]
    if mask.shape != truth.shape:
        raise ShapeError(f"mask {mask.shape} vs truth {truth.shape}")
    if mask.shape[0] != len(class_names):
        raise ShapeError(f"{mask.shape[0]} channels but {len(class_names)} class names")
    return ScoreReport({name: classification_metrics(mask[i], truth[i]) for i, name in enumerate(class_names)})


# -- aggregation and CSV export ----------------------------------------------

def mean_and_se(values: Iterable[float]) -> tuple[float, float]:
    """Mean and standard error sd/sqrt(n) with the n-1 sample deviation (SE 0 for n < 2)."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def report_rows(model: str, phase: str, volume_id: str, report: ScoreReport) -> list[dict]:
    rows = []
    for name, s in report.classes.items():
        row = {"model": model, "phase": phase, "volume_id": volume_id, "class": name}
        row.update(s.as_dict())
        rows.append(row)
    return rows


def summary_rows(rows: Sequence[dict]) -> list[dict]:
    """Per (model, phase, class): a ``mean`` row and an ``se`` row over volumes."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["model"], r["phase"], r["class"]), []).append(r)
    out = []
    for (model, phase, cls), members in groups.items():
        stats = {m: mean_and_se(r[m] for r in members) for m in METRIC_NAMES}
        for tag, idx in (("mean", 0), ("se", 1)):
            row = {"model": model, "phase": phase, "volume_id": tag, "class": cls}
            row.update({m: stats[m][idx] for m in METRIC_NAMES})
            out.append(row)
    return out


def write_report_csv(rows: Sequence[dict], path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for r in rows:
        cells = []
        for col in CSV_COLUMNS:
            v = r[col]
            cells.append(repr(float(v)) if col in METRIC_NAMES else str(v))
        lines.append(",".join(cells))
    atomic_write(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for m in METRIC_NAMES:
            r[m] = float(r[m])
    return rows
