"""Confusion matrices, class-wise accuracy, and report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import CLASS_NAMES, NUM_CLASSES, LabeledDataset, batch_iterator
from .tensor import Tensor

AUG_ORDER = ["Original", "Aug1", "Aug2", "Aug3", "Aug4"]
UNDEFINED = "–"


class ConfusionMatrix:
    """Rows are true classes, columns predicted classes, both in class-code order."""

    def __init__(self, counts: np.ndarray | None = None, num_classes: int = NUM_CLASSES):
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer) or (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative integers")
        self.counts = counts.astype(np.int64)

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = NUM_CLASSES) -> "ConfusionMatrix":
        y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValueError(f"{len(y_true)} labels vs {len(y_pred)} predictions")
        m = cls(num_classes=num_classes)
        m.add(y_true, y_pred)
        return m

    def add(self, y_true: np.ndarray, y_pred: np.ndarray) -> None:
        if len(y_true) == 0:
            return
        k = self.counts.shape[0]
        if max(y_true.max(), y_pred.max()) >= k or min(y_true.min(), y_pred.min()) < 0:
            raise ValueError(f"class index outside [0, {k})")
        np.add.at(self.counts, (y_true, y_pred), 1)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    @property
    def row_sums(self) -> list[int]:
        return self.counts.sum(axis=1).tolist()

    def overall_fraction(self) -> Fraction:
        if self.total == 0:
            raise ValueError("empty confusion matrix")
        return Fraction(self.correct, self.total)

    def recalls(self) -> list[float | None]:
        """Diagonal over row sum per class; None where the class has no samples."""
        return [int(self.counts[c, c]) / r if r else None for c, r in enumerate(self.row_sums)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + CLASS_NAMES[: len(self.counts)])
        for name, row in zip(CLASS_NAMES, self.counts.tolist()):
            w.writerow([name] + row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty confusion CSV")
        header, body = rows[0], rows[1:]
        if header[1:] != CLASS_NAMES[: len(header) - 1] or len(body) != len(header) - 1:
            raise ValueError("confusion CSV header does not list the classes in code order")
        counts = []
        for name, row in zip(header[1:], body):
            if row[0] != name:
                raise ValueError(f"confusion CSV row {row[0]!r} out of order, expected {name!r}")
            counts.append([int(v) for v in row[1:]])
        return cls(np.array(counts, dtype=np.int64))


@dataclass
class EvalReport:
    dataset: str
    augmentation: str
    confusion: ConfusionMatrix
    checkpoint: str = ""
    notes: dict = field(default_factory=dict)

    @property
    def sample_count(self) -> int:
        return self.confusion.total

    @property
    def overall_accuracy(self) -> float:
        """Fraction in [0, 1], trace over total."""
        return float(self.confusion.overall_fraction())

    @property
    def per_class_accuracy(self) -> list[float | None]:
        return self.confusion.recalls()

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "augmentation": self.augmentation,
            "checkpoint": self.checkpoint,
            "sample_count": self.sample_count,
            "overall_accuracy": self.overall_accuracy,
            "overall_accuracy_pct": round(100 * self.overall_accuracy, 2),
            "per_class_accuracy": {
                name: (None if acc is None else acc) for name, acc in zip(CLASS_NAMES, self.per_class_accuracy)
            },
            "confusion": self.confusion.counts.tolist(),
            "classes": CLASS_NAMES,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("classes") != CLASS_NAMES:
            raise ValueError("report class list differs from the emotion class order")
        report = cls(d["dataset"], d["augmentation"], ConfusionMatrix(np.array(d["confusion"], dtype=np.int64)),
                     d.get("checkpoint", ""), d.get("notes", {}))
        if report.sample_count != d["sample_count"] or report.overall_accuracy != d["overall_accuracy"]:
            raise ValueError("report totals are inconsistent with its confusion matrix")
        return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["dataset", "augmentation", "checkpoint", "sample_count", "overall_accuracy",
                 "overall_accuracy_pct", "per_class_accuracy", "confusion", "classes", "notes"],
    "properties": {
        "dataset": {"type": "string"},
        "augmentation": {"type": "string"},
        "checkpoint": {"type": "string"},
        "sample_count": {"type": "integer", "minimum": 1},
        "overall_accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "overall_accuracy_pct": {"type": "number", "minimum": 0, "maximum": 100},
        "per_class_accuracy": {
            "type": "object",
            "properties": {name: {"type": ["number", "null"], "minimum": 0, "maximum": 1} for name in CLASS_NAMES},
            "required": CLASS_NAMES,
        },
        "confusion": {
            "type": "array", "minItems": NUM_CLASSES, "maxItems": NUM_CLASSES,
            "items": {"type": "array", "minItems": NUM_CLASSES, "maxItems": NUM_CLASSES,
                      "items": {"type": "integer", "minimum": 0}},
        },
        "classes": {"type": "array", "items": {"type": "string"}},
        "notes": {"type": "object"},
    },
}


def evaluate(
    model: Callable[[Tensor], Tensor],
    test_ds: LabeledDataset,
    batch_size: int = 16,
    dataset: str | None = None,
    augmentation: str = "Original",
    checkpoint: str = "",
) -> EvalReport:
    """Argmax predictions (ties go to the lowest class code) tallied into a confusion matrix."""
    if len(test_ds) == 0:
        raise ValueError("test set is empty")
    was_training = getattr(model, "training", None)
    if hasattr(model, "eval"):
        model.eval()
    matrix = ConfusionMatrix()
    try:
        for x, y in batch_iterator(test_ds, batch_size, shuffle=False):
            logits = model(x)
            if logits.shape != (len(y), NUM_CLASSES):
                raise ValueError(f"model produced logits of shape {logits.shape}, expected ({len(y)}, {NUM_CLASSES})")
            matrix.add(y, logits.data.argmax(axis=1))
    finally:
        if was_training is not None:
            model.training = was_training
    return EvalReport(dataset or test_ds.name, augmentation, matrix, checkpoint)


def _require_path(path) -> Path:
    if path is None or not str(path):
        raise ValueError("output path must be nonempty")
    return Path(path)


def emit_confusion_csv(matrix: ConfusionMatrix, path: str | Path) -> None:
    _require_path(path).write_text(matrix.to_csv(), encoding="utf-8")


def parse_confusion_csv(path: str | Path) -> ConfusionMatrix:
    return ConfusionMatrix.from_csv(Path(path).read_text(encoding="utf-8"))


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def emit_report_json(report: EvalReport, path: str | Path) -> None:
    _require_path(path).write_text(report_json(report), encoding="utf-8")


def parse_report_json(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------- tables


def _aug_key(tag: str) -> tuple[int, str]:
    return (AUG_ORDER.index(tag), "") if tag in AUG_ORDER else (len(AUG_ORDER), tag)


@dataclass
class ComparisonTable:
    rows: list[tuple[str, str, str]]  # dataset, augmentation, accuracy with two decimals

    def text(self) -> str:
        header = ("Dataset", "Augmentation", "Accuracy (%)")
        widths = [max(len(r[i]) for r in self.rows + [header]) for i in range(3)]
        lines = []
        for row in [header] + self.rows:
            lines.append(f"{row[0]:<{widths[0]}}  {row[1]:<{widths[1]}}  {row[2]:>{widths[2]}}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "augmentation", "accuracy_pct"])
        w.writerows(self.rows)
        return buf.getvalue()


def comparison_table(reports: Sequence[EvalReport]) -> ComparisonTable:
    if not reports:
        raise ValueError("need at least one report")
    ordered = sorted(reports, key=lambda r: (r.dataset, _aug_key(r.augmentation)))
    return ComparisonTable([(r.dataset, r.augmentation, f"{100 * r.overall_accuracy:.2f}") for r in ordered])


def class_accuracy_table(reports: Sequence[EvalReport]) -> str:
    """Per-class accuracy (%) with one column per report; classes without test samples show '–'."""
    ordered = sorted(reports, key=lambda r: (r.dataset, _aug_key(r.augmentation)))
    cols = [f"{r.dataset}/{r.augmentation}" for r in ordered]
    width = max([len(c) for c in cols] + [8])
    lines = [f"{'Class':<10}" + "".join(f"{c:>{width + 2}}" for c in cols)]
    for i, name in enumerate(CLASS_NAMES):
        cells = []
        for r in ordered:
            acc = r.per_class_accuracy[i]
            cells.append(UNDEFINED if acc is None else f"{100 * acc:.2f}")
        lines.append(f"{name:<10}" + "".join(f"{c:>{width + 2}}" for c in cells))
    lines.append(f"{'Overall':<10}" + "".join(f"{100 * r.overall_accuracy:>{width + 2}.2f}" for r in ordered))
    return "\n".join(lines) + "\n"
