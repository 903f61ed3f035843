"""Per-sample precision, recall and F1 with blasts as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class MissingLabels(ValueError):
    pass


@dataclass(frozen=True)
class SampleMetrics:
    tp: int
    fp: int
    fn: int
    p: float
    r: float
    f1: float
    sample_id: str = ""

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, sample_id: str = "") -> SampleMetrics:
        # A sample without blasts scores 1.0 when nothing is flagged.
        if tp + fp == 0:
            p = 1.0 if tp + fn == 0 else 0.0
        else:
            p = tp / (tp + fp)
        if tp + fn == 0:
            r = 1.0 if tp + fp == 0 else 0.0
        else:
            r = tp / (tp + fn)
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        return cls(int(tp), int(fp), int(fn), p, r, f1, sample_id)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_metrics(predicted: np.ndarray, labels: np.ndarray, sample_id: str = "") -> SampleMetrics:
    predicted = np.asarray(predicted, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    tp = int(np.sum(predicted & labels))
    fp = int(np.sum(predicted & ~labels))
    fn = int(np.sum(~predicted & labels))
    return SampleMetrics.from_counts(tp, fp, fn, sample_id)


def mean_metrics(per_sample: list[SampleMetrics]) -> dict[str, float]:
    """Unweighted mean over samples, whatever their event counts."""
    if not per_sample:
        return {"p": float("nan"), "r": float("nan"), "f1": float("nan")}
    return {k: float(np.mean([getattr(m, k) for m in per_sample])) for k in ("p", "r", "f1")}


def mean_std(values: list[float]) -> dict[str, float]:
    """Mean and sample standard deviation (``ddof=1``; 0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": int(len(arr))}
