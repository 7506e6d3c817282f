"""Joint occupancy + activity objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .. import ops
from ..tensor import DimensionError, Tensor


@dataclass(frozen=True)
class LossReport:
    rod_ce: float
    har_ce: float
    total: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def har_mask(har_labels: Sequence[Optional[int]]) -> np.ndarray:
    """Boolean mask of samples that carry an activity label (None or negative means absent)."""
    return np.array([h is not None and h >= 0 for h in har_labels], dtype=bool)


def joint_loss(rod_logits: Tensor, har_logits: Tensor, rod_labels, har_labels,
               weights: tuple = (1.0, 1.0)) -> tuple[Tensor, LossReport]:
    """``w_rod * CE(rod) + w_har * CE(har over labelled samples)``.

    Samples without an activity label contribute only to the occupancy term;
    when no sample in the batch has one the activity term is exactly zero.
    """
    n = rod_logits.shape[0]
    if har_logits.shape[0] != n or len(rod_labels) != n or len(har_labels) != n:
        raise DimensionError("joint_loss: logits and label batches differ in size")
    rod = ops.softmax_cross_entropy(rod_logits, np.asarray(rod_labels, dtype=np.int64))
    mask = har_mask(har_labels)
    total = rod * weights[0] if weights[0] != 1.0 else rod
    har_value = 0.0
    if mask.any():
        idx = np.flatnonzero(mask)
        har = ops.softmax_cross_entropy(ops.take_rows(har_logits, idx),
                                        np.asarray([har_labels[i] for i in idx], dtype=np.int64))
        har_value = float(har.data)
        total = total + (har * weights[1] if weights[1] != 1.0 else har)
    report = LossReport(float(rod.data), har_value, float(total.data))
    return total, report
