"""Confusion matrices, per-class precision/recall/F1 and report rendering."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyMatrix, InvalidLabel


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool = False  # some ratio had a zero denominator and was reported as 0


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = true class, cols = predicted class
    per_class: list
    accuracy: float
    weighted_avg: tuple  # (precision, recall, f1)

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]


def confusion_matrix(truths, preds, k: int) -> np.ndarray:
    truths = np.asarray(truths, dtype=np.int64).ravel()
    preds = np.asarray(preds, dtype=np.int64).ravel()
    if truths.shape != preds.shape:
        raise ValueError(f"{truths.size} truths vs {preds.size} predictions")
    for name, arr in (("truth", truths), ("prediction", preds)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise InvalidLabel(f"{name} label outside [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (truths, preds), 1)
    return m


def _ratio(num: float, den: float):
    return (num / den, False) if den else (0.0, True)


def metrics_from_confusion(matrix) -> EvalReport:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.size == 0:
        raise EmptyMatrix(f"expected a non-empty square matrix, got shape {m.shape}")
    if m.dtype.kind not in "iu" or (m < 0).any():
        raise ValueError("confusion matrix must hold non-negative integers")
    total = int(m.sum())
    if total == 0:
        raise EmptyMatrix("confusion matrix has no samples")
    per_class = []
    for c in range(m.shape[0]):
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c, :].sum()) - tp
        precision, bad_p = _ratio(tp, tp + fp)
        recall, bad_r = _ratio(tp, tp + fn)
        f1, bad_f = _ratio(2 * precision * recall, precision + recall)
        per_class.append(ClassMetrics(precision, recall, f1, tp + fn, bad_p or bad_r or bad_f))
    support = np.array([pc.support for pc in per_class], dtype=np.float64)
    weights = support / total

    def wavg(attr):
        return float(sum(w * getattr(pc, attr) for w, pc in zip(weights, per_class)))

    return EvalReport(
        confusion=m.astype(np.int64),
        per_class=per_class,
        accuracy=int(np.trace(m)) / total,
        weighted_avg=(wavg("precision"), wavg("recall"), wavg("f1")),
    )


def evaluate_predictions(truths, preds, k: int) -> EvalReport:
    return metrics_from_confusion(confusion_matrix(truths, preds, k))


def render_report(report: EvalReport, class_names: Sequence[str], style: str = "text") -> bytes:
    """Per-class table with the weighted-average row last.

    ``text`` shows two decimals; ``csv`` keeps full precision with columns
    ``class,precision,recall,f1,support``.
    """
    if len(class_names) != report.num_classes:
        raise ValueError(f"{len(class_names)} class names for {report.num_classes} classes")
    total = int(report.confusion.sum())
    wp, wr, wf = report.weighted_avg
    if style == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for name, pc in zip(class_names, report.per_class):
            writer.writerow([name, repr(pc.precision), repr(pc.recall), repr(pc.f1), pc.support])
        writer.writerow(["weighted_avg", repr(wp), repr(wr), repr(wf), total])
        return buf.getvalue().encode("utf-8")
    if style != "text":
        raise ValueError(f"unknown report style {style!r}")
    label = "Weighted avg"
    width = max([len(label)] + [len(n) for n in class_names])
    lines = [f"{'class':<{width}}  precision  recall      f1  support"]
    for name, pc in zip(class_names, report.per_class):
        flag = "  *" if pc.degenerate else ""
        lines.append(f"{name:<{width}}  {pc.precision:9.2f}  {pc.recall:6.2f}  {pc.f1:6.2f}  {pc.support:7d}{flag}")
    lines.append(f"{label:<{width}}  {wp:9.2f}  {wr:6.2f}  {wf:6.2f}  {total:7d}")
    lines.append("")
    lines.append(f"accuracy: {report.accuracy:.4f} ({int(np.trace(report.confusion))}/{total})")
    if any(pc.degenerate for pc in report.per_class):
        lines.append("* zero denominator, reported as 0")
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_report_csv(data: bytes) -> list:
    """Inverse of the csv rendering: list of (class, precision, recall, f1, support)."""
    rows = list(csv.reader(io.StringIO(data.decode("utf-8"))))
    return [(r[0], float(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in rows[1:]]


def render_confusion_csv(matrix: np.ndarray, class_names: Sequence[str]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *class_names])
    for name, row in zip(class_names, np.asarray(matrix)):
        writer.writerow([name, *(int(v) for v in row)])
    return buf.getvalue().encode("utf-8")
