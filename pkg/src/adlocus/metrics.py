"""Binary segmentation metrics and threshold analysis.

Class 0 is background ("no billboard"), class 1 is billboard. ``n[i][j]``
counts pixels of true class ``i`` predicted as class ``j``. All per-image
metrics are averaged arithmetically over images, never pooled over pixels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ContractError, ShapeError

SWEEP_THRESHOLDS = np.arange(21) / 20.0
DEFAULT_THRESHOLD = 0.5
_TIE_ATOL = 1e-12


@dataclass(frozen=True)
class ConfusionCounts:
    n: np.ndarray  # (2, 2) int64

    @property
    def tn(self) -> int:
        return int(self.n[0, 0])

    @property
    def fp(self) -> int:
        return int(self.n[0, 1])

    @property
    def fn(self) -> int:
        return int(self.n[1, 0])

    @property
    def tp(self) -> int:
        return int(self.n[1, 1])

    @property
    def t(self) -> np.ndarray:
        """Pixels per true class."""
        return self.n.sum(axis=1)

    @property
    def predicted(self) -> np.ndarray:
        """Pixels per predicted class (column sums)."""
        return self.n.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.n.sum())

    @property
    def degenerate(self) -> bool:
        """True when FPR or TPR has a zero denominator (a class is absent from the truth)."""
        return bool((self.t == 0).any())


def _check_binary(mask: np.ndarray, name: str) -> None:
    if not np.isin(mask, (0, 1)).all():
        raise ContractError(f"{name} must contain only 0 and 1")


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
    _check_binary(pred, "pred")
    _check_binary(truth, "truth")
    joint = 2 * truth.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
    counts = np.bincount(joint, minlength=4).reshape(2, 2)
    return ConfusionCounts(counts)


def pixel_accuracy(c: ConfusionCounts) -> float:
    return float(np.trace(c.n) / c.total)


def mean_accuracy(c: ConfusionCounts) -> float:
    """Mean of per-class recall over classes present in the truth."""
    t = c.t
    present = t > 0
    return float(np.mean(np.diag(c.n)[present] / t[present]))


def class_iou(c: ConfusionCounts) -> np.ndarray:
    """Per-class IOU; NaN for a class absent from both truth and prediction."""
    diag = np.diag(c.n).astype(np.float64)
    union = c.t + c.predicted - diag
    iou = np.full(2, np.nan)
    nonempty = union > 0
    iou[nonempty] = diag[nonempty] / union[nonempty]
    return iou


def mean_iou(c: ConfusionCounts) -> float:
    return float(np.nanmean(class_iou(c)))


def fw_iou(c: ConfusionCounts) -> float:
    iou = np.nan_to_num(class_iou(c))
    return float(np.dot(c.t, iou) / c.total)


def accuracy(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / (c.tp + c.tn + c.fp + c.fn)


def fpr_tpr(c: ConfusionCounts) -> tuple[float, float]:
    """(FPR, TPR); a rate with a zero denominator is reported as 0 (see ``c.degenerate``)."""
    neg, pos = c.fp + c.tn, c.tp + c.fn
    fpr = c.fp / neg if neg else 0.0
    tpr = c.tp / pos if pos else 0.0
    return fpr, tpr


def binarize(prob, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """1 where ``prob >= threshold`` else 0."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


class ImageMetrics(NamedTuple):
    image_id: str
    pa: float
    ma: float
    miou: float
    fwiou: float


def image_metrics(image_id: str, pred, truth) -> ImageMetrics:
    c = confusion(pred, truth)
    return ImageMetrics(image_id, pixel_accuracy(c), mean_accuracy(c), mean_iou(c), fw_iou(c))


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics] = field(default_factory=list)

    def _mean(self, name: str) -> float:
        return float(np.mean([getattr(m, name) for m in self.per_image]))

    @property
    def pa(self) -> float:
        return self._mean("pa")

    @property
    def ma(self) -> float:
        return self._mean("ma")

    @property
    def miou(self) -> float:
        return self._mean("miou")

    @property
    def fwiou(self) -> float:
        return self._mean("fwiou")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "pa", "ma", "miou", "fwiou"])
            for m in self.per_image:
                w.writerow([m.image_id, *(_fmt(v) for v in m[1:])])
            w.writerow(["MEAN", _fmt(self.pa), _fmt(self.ma), _fmt(self.miou), _fmt(self.fwiou)])


def _fmt(v: float) -> str:
    return f"{v:.6f}"


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float
    accuracy: float


def sweep_image(prob, truth, thresholds=SWEEP_THRESHOLDS) -> np.ndarray:
    """Accuracy, FPR and TPR of one image at each threshold, shape ``(len(thresholds), 3)``.

    Uses sorted probabilities so each threshold is a binary search rather than
    a fresh binarization.
    """
    prob = np.asarray(prob, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if prob.shape != truth.shape:
        raise ShapeError(f"prob {prob.shape} vs truth {truth.shape}")
    _check_binary(truth, "truth")
    pos = np.sort(prob[truth == 1])
    neg = np.sort(prob[truth == 0])
    thresholds = np.asarray(thresholds, dtype=np.float64)
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    tn = neg.size - fp
    acc = (tp + tn) / prob.size
    fpr = fp / neg.size if neg.size else np.zeros_like(acc)
    tpr = tp / pos.size if pos.size else np.zeros_like(acc)
    return np.stack([acc, fpr, tpr], axis=1)


class SweepAccumulator:
    """Streams per-image sweeps and keeps their per-image accuracies and running sums."""

    def __init__(self, thresholds=SWEEP_THRESHOLDS):
        self.thresholds = np.asarray(thresholds, dtype=np.float64)
        self.total = np.zeros((self.thresholds.size, 3))
        self.per_image_accuracy: list[np.ndarray] = []

    def add(self, prob, truth) -> None:
        rows = sweep_image(prob, truth, self.thresholds)
        self.total += rows
        self.per_image_accuracy.append(rows[:, 0])

    @property
    def count(self) -> int:
        return len(self.per_image_accuracy)

    def points(self) -> list[RocPoint]:
        if not self.count:
            raise ContractError("threshold sweep needs at least one image")
        mean = self.total / self.count
        return [
            RocPoint(float(t), float(f), float(r), float(a))
            for t, (a, f, r) in zip(self.thresholds, mean)
        ]


def threshold_sweep(probs: Iterable, truths: Iterable) -> list[RocPoint]:
    """Mean per-image accuracy/FPR/TPR at thresholds 0, 0.05, ..., 1."""
    probs, truths = list(probs), list(truths)
    if len(probs) != len(truths):
        raise ContractError(f"{len(probs)} probability maps but {len(truths)} truths")
    acc = SweepAccumulator()
    for p, t in zip(probs, truths):
        acc.add(p, t)
    return acc.points()


def best_threshold(points: list[RocPoint]) -> float:
    """Threshold with the largest mean accuracy; ties prefer 0.5, then the smaller threshold."""
    if not points:
        raise ContractError("no sweep points")
    top = max(p.accuracy for p in points)
    tied = sorted(p.threshold for p in points if abs(p.accuracy - top) <= _TIE_ATOL)
    for t in tied:
        if abs(t - DEFAULT_THRESHOLD) <= _TIE_ATOL:
            return t
    return tied[0]


def write_sweep_csv(points: list[RocPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "mean_accuracy", "mean_fpr", "mean_tpr"])
        for p in points:
            w.writerow([f"{p.threshold:.2f}", _fmt(p.accuracy), _fmt(p.fpr), _fmt(p.tpr)])


def read_sweep_csv(path) -> list[RocPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return [
            RocPoint(float(r["threshold"]), float(r["mean_fpr"]), float(r["mean_tpr"]), float(r["mean_accuracy"]))
            for r in rows
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"{path}: not a sweep CSV ({exc})") from exc


def write_roc_csv(points: list[RocPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for p in sorted(points, key=lambda p: p.threshold):
            w.writerow([f"{p.threshold:.2f}", _fmt(p.fpr), _fmt(p.tpr)])


def write_accuracy_distribution_csv(acc: SweepAccumulator, image_ids: list[str], path) -> None:
    """Per-image accuracy at every threshold (long format), for box plots."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "threshold", "accuracy"])
        for image_id, row in zip(image_ids, acc.per_image_accuracy):
            for t, a in zip(acc.thresholds, row):
                w.writerow([image_id, f"{t:.2f}", _fmt(a)])


def predict_batches(params, manifest, batch_size: int = 8):
    """Yield ``(source_id, prob (1,H,W), truth mask (1,H,W))`` for each manifest entry."""
    from .data import load_sample
    from .model import forward

    size = params.config.input_size
    entries = list(manifest.entries)
    for start in range(0, len(entries), batch_size):
        samples = [load_sample(i, m, size) for i, m in entries[start:start + batch_size]]
        probs = forward(params, np.stack([s.image for s in samples]))
        for s, p in zip(samples, probs):
            yield s.source_id, p, s.mask


def evaluate_dataset(params, manifest, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Forward, binarize and score every image; the report means are per-image means."""
    report = MetricsReport()
    for source_id, prob, truth in predict_batches(params, manifest):
        report.per_image.append(image_metrics(source_id, binarize(prob, threshold), truth.astype(np.uint8)))
    if not report.per_image:
        raise ContractError("cannot evaluate an empty dataset")
    return report


def sweep_dataset(params, manifest) -> tuple[SweepAccumulator, list[str]]:
    acc = SweepAccumulator()
    ids = []
    for source_id, prob, truth in predict_batches(params, manifest):
        acc.add(prob, truth)
        ids.append(source_id)
    return acc, ids
