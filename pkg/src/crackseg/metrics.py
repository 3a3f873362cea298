"""Pixel-level evaluation: confusion counts and the five ratio metrics.

Counts are plain integers and merge additively, so batches can be reduced in
any order; metrics are computed once from globally summed counts
(micro-averaging).
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    iou: float
    n_images: int = 0
    threshold: float = 0.5

    def values(self) -> Tuple[float, float, float, float, float]:
        return (self.accuracy, self.precision, self.recall, self.f1, self.iou)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
            "n_images": self.n_images,
            "threshold": self.threshold,
        }


METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1", "iou")


def _as_array(x) -> np.ndarray:
    if hasattr(x, "detach"):  # torch tensor
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def confusion_counts(pred_prob, target, threshold: float = 0.5) -> ConfusionCounts:
    """Tally TP/FP/FN/TN over all pixels after thresholding pred_prob > threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred_prob = _as_array(pred_prob)
    target = _as_array(target)
    if pred_prob.shape != target.shape:
        raise ValueError(
            f"pred shape {pred_prob.shape} != target shape {target.shape}"
        )
    pred = pred_prob > threshold
    truth = target > 0.5
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp, fp, fn, tn)


def compute_metrics(c: ConfusionCounts, n_images: int = 0, threshold: float = 0.5) -> MetricReport:
    """accuracy, precision, recall, f1 (Dice) and IoU from one count set.

    Zero-denominator convention: a ratio with an empty denominator is 1.0 when
    prediction and target are both empty (tp+fp+fn == 0) and 0.0 otherwise,
    which keeps per-image reports NaN-free.
    """
    if c.total <= 0:
        raise ValueError("confusion counts cover no pixels")
    empty = c.tp + c.fp + c.fn == 0

    def ratio(num: int, den: int) -> float:
        if den > 0:
            return num / den
        return 1.0 if empty else 0.0

    return MetricReport(
        accuracy=(c.tp + c.tn) / c.total,
        precision=ratio(c.tp, c.tp + c.fp),
        recall=ratio(c.tp, c.tp + c.fn),
        f1=ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        iou=ratio(c.tp, c.tp + c.fp + c.fn),
        n_images=n_images,
        threshold=threshold,
    )


def aggregate_report(
    per_batch: Sequence[ConfusionCounts], n_images: int = 0, threshold: float = 0.5
) -> MetricReport:
    """Sum counts globally over the dataset, then compute metrics once."""
    if not per_batch:
        raise ValueError("no confusion counts to aggregate")
    total = ConfusionCounts()
    for c in per_batch:
        total = total + c
    return compute_metrics(total, n_images=n_images, threshold=threshold)


def metric_row(report: MetricReport) -> str:
    """The five metric cells, 3 decimals, space separated."""
    return " ".join(f"{v:.3f}" for v in report.values())


def format_table(rows: Sequence[Tuple[str, MetricReport]], label_header: str = "model") -> str:
    """Aligned plain-text table with one row per model/config and five metric columns."""
    width = max([len(label_header)] + [len(label) for label, _ in rows])
    header = "  ".join([label_header.ljust(width)] + [c.rjust(9) for c in METRIC_COLUMNS])
    lines = [header]
    for label, report in rows:
        cells = [f"{v:.3f}".rjust(9) for v in report.values()]
        lines.append("  ".join([label.ljust(width)] + cells))
    return "\n".join(lines)


def write_records(path, rows: Sequence[Tuple[str, MetricReport]], **extra):
    """Append one JSON record per row to a JSON-lines file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for label, report in rows:
            record = {"label": label, **report.to_dict(), **extra}
            f.write(json.dumps(record) + "\n")
