"""Classification metrics derived from a confusion matrix."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import ParameterError


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], k: int) -> np.ndarray:
    """``c[i, j]`` counts samples of true class i predicted as j."""
    c = np.zeros((k, k), dtype=np.int64)
    np.add.at(c, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return c


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(np.shape(num)), where=np.asarray(den) > 0)


@dataclass(frozen=True)
class MetricsReport:
    task: str
    classes: tuple
    samples: int
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    precision_micro: float
    recall_micro: float
    f1_micro: float
    per_class_f1: tuple
    confusion: tuple

    @classmethod
    def from_confusion(cls, confusion, task: str = "", classes: Optional[Sequence[str]] = None) -> "MetricsReport":
        """Macro averages run over classes that occur in the labels or the predictions."""
        c = np.asarray(confusion, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ParameterError(f"confusion matrix must be square, got shape {c.shape}")
        total = int(c.sum())
        if total == 0:
            raise ParameterError("cannot compute metrics for an empty evaluation set")
        tp = np.diag(c).astype(np.float64)
        support = c.sum(axis=1)
        predicted = c.sum(axis=0)
        precision = _ratio(tp, predicted)
        recall = _ratio(tp, support)
        f1 = _ratio(2 * precision * recall, precision + recall)
        active = (support + predicted) > 0
        accuracy = tp.sum() / total
        # single-label: every error is one false positive and one false negative
        micro = accuracy
        names = tuple(classes) if classes is not None else tuple(str(i) for i in range(len(c)))
        return cls(
            task=task,
            classes=names,
            samples=total,
            accuracy=float(accuracy),
            precision_macro=float(precision[active].mean()),
            recall_macro=float(recall[active].mean()),
            f1_macro=float(f1[active].mean()),
            precision_micro=float(micro),
            recall_micro=float(micro),
            f1_micro=float(micro),
            per_class_f1=tuple(float(v) for v in f1),
            confusion=tuple(tuple(int(v) for v in row) for row in c),
        )

    @classmethod
    def from_predictions(cls, y_true, y_pred, k: int, task: str = "", classes=None) -> "MetricsReport":
        return cls.from_confusion(confusion_matrix(y_true, y_pred, k), task, classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        d["per_class_f1"] = list(self.per_class_f1)
        d["confusion"] = [list(r) for r in self.confusion]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def render(self) -> str:
        lines = [f"task: {self.task}  samples: {self.samples}"]
        for key in ("accuracy", "precision_macro", "recall_macro", "f1_macro",
                    "precision_micro", "recall_micro", "f1_micro"):
            lines.append(f"  {key:<16} {getattr(self, key):.4f}")
        width = max(6, max(len(n) for n in self.classes) + 1)
        lines.append("confusion (rows: true, cols: predicted)")
        lines.append(" " * width + "".join(f"{n[:width - 1]:>{width}}" for n in self.classes))
        for name, row in zip(self.classes, self.confusion):
            lines.append(f"{name:<{width}}" + "".join(f"{v:>{width}d}" for v in row))
        return "\n".join(lines)
