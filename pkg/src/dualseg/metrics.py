"""Pixel confusion counts and the precision/recall/F1 family.

Counts pool over every evaluated pixel (micro-averaging), so accumulating
per tile and summing is exactly the same as evaluating one concatenated
raster. Any 0/0 ratio evaluates to 0 by convention.
"""

from dataclasses import dataclass

import numpy as np

from dualseg.errors import ConfigError, ShapeError

METRIC_NAMES = ("f1", "precision", "recall", "accuracy")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ConfigError("confusion counts must be nonnegative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=self.tp + other.tp,
            fp=self.fp + other.fp,
            fn=self.fn + other.fn,
            tn=self.tn + other.tn,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Hard mask from a probability raster (>= threshold counts as positive)."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def accumulate_confusion(pred_mask: np.ndarray, target: np.ndarray,
                         counts: ConfusionCounts = ConfusionCounts()) -> ConfusionCounts:
    """Add one raster's pixel counts; order of accumulation never matters."""
    pred_mask = np.asarray(pred_mask)
    target = np.asarray(target)
    if pred_mask.shape != target.shape:
        raise ShapeError(f"mask shape {pred_mask.shape} != target shape {target.shape}")
    if not np.isin(pred_mask, (0, 1)).all() or not np.isin(target, (0, 1)).all():
        raise ShapeError("confusion accumulation expects binary rasters")
    pred = pred_mask.astype(bool)
    true = target.astype(bool)
    return counts + ConfusionCounts(
        tp=int(np.count_nonzero(pred & true)),
        fp=int(np.count_nonzero(pred & ~true)),
        fn=int(np.count_nonzero(~pred & true)),
        tn=int(np.count_nonzero(~pred & ~true)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def compute_prf1(counts: ConfusionCounts):
    """Returns (precision, recall, f1) with the 0/0 -> 0 convention."""
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = _ratio(2.0 * precision * recall, precision + recall)
    return precision, recall, f1


def metric_value(name: str, counts: ConfusionCounts) -> float:
    """Single scalar for the named metric; the analysis layer is agnostic to
    which one is plugged in."""
    if name not in METRIC_NAMES:
        raise ConfigError(f"unknown metric {name!r}; expected one of {METRIC_NAMES}")
    precision, recall, f1 = compute_prf1(counts)
    if name == "f1":
        return f1
    if name == "precision":
        return precision
    if name == "recall":
        return recall
    return _ratio(counts.tp + counts.tn, counts.total)
