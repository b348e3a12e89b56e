"""Overlap metrics between binary occupancy sets.

Every function accepts masks, boolean arrays or 0/1 arrays of equal shape.
When both sets are empty IoU and Dice are defined as 1.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .volume import Mask


def _binary(a) -> np.ndarray:
    data = a.data if isinstance(a, Mask) else np.asarray(a)
    return data.astype(bool)


def _pair(a, b):
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    return a, b


@dataclass(frozen=True)
class MetricReport:
    iou: float
    dice: float
    disagreement_fraction: float
    counts: tuple[int, int, int, int]

    @classmethod
    def from_counts(cls, n_a: int, n_b: int, inter: int, total: int) -> MetricReport:
        union = n_a + n_b - inter
        iou_ = 1.0 if union == 0 else inter / union
        dice_ = 1.0 if n_a + n_b == 0 else 2.0 * inter / (n_a + n_b)
        return cls(iou_, dice_, (union - inter) / total if total else 0.0,
                   (n_a, n_b, inter, union))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["counts"] = dict(zip(("a", "b", "intersection", "union"), self.counts))
        return out

    def __str__(self):
        a, b, inter, union = self.counts
        return (f"iou={self.iou:.6f} dice={self.dice:.6f} "
                f"disagreement={self.disagreement_fraction:.6g} "
                f"|a|={a} |b|={b} |a&b|={inter} |a|b|={union}")


def compare(a, b) -> MetricReport:
    a, b = _pair(a, b)
    return MetricReport.from_counts(int(a.sum()), int(b.sum()), int((a & b).sum()), a.size)


def iou(a, b) -> float:
    return compare(a, b).iou


def dice(a, b) -> float:
    return compare(a, b).dice


def disagreement(a, b) -> float:
    """Fraction of positions where the two masks differ."""
    a, b = _pair(a, b)
    return float(np.count_nonzero(a != b)) / a.size if a.size else 0.0
