"""Binary classification metrics and threshold selection.

Prediction rule everywhere: a sample is called target iff score >= t.
Degenerate denominators follow the usual conventions (precision 0 when
nothing is predicted positive, recall 0 when there are no positives).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .audio_io import NON_TARGET, TARGET


class MetricsError(Exception):
    pass


class LengthMismatch(MetricsError):
    pass


class EmptyInput(MetricsError):
    pass


class SingleClassInput(MetricsError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


@dataclass(frozen=True)
class RocCurve:
    points: tuple


@dataclass(frozen=True)
class ThresholdResult:
    threshold: float
    confusion: Confusion
    accuracy: float
    precision: float
    recall: float
    fbeta: float


def _as_bool_labels(labels) -> np.ndarray:
    out = np.empty(len(labels), dtype=bool)
    for i, lab in enumerate(labels):
        if isinstance(lab, (bool, np.bool_)):
            out[i] = bool(lab)
        elif lab == TARGET:
            out[i] = True
        elif lab == NON_TARGET:
            out[i] = False
        else:
            raise MetricsError(f"unknown label {lab!r}")
    return out


def confusion(scores: Sequence[float], labels, t: float) -> Confusion:
    """Count outcomes of thresholding scores at t (predict target if >= t)."""
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    if len(scores) == 0:
        raise EmptyInput("no samples to evaluate")
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool_labels(labels)
    pred = s >= t
    return Confusion(
        tp=int(np.sum(pred & y)),
        fp=int(np.sum(pred & ~y)),
        tn=int(np.sum(~pred & ~y)),
        fn=int(np.sum(~pred & y)),
    )


def accuracy(c: Confusion) -> float:
    return (c.tp + c.tn) / c.total


def precision(c: Confusion) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: Confusion) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def fbeta(c: Confusion, beta: float) -> float:
    """F_beta from the confusion counts; beta=2 weighs recall double."""
    p = precision(c)
    r = recall(c)
    if p == 0.0 and r == 0.0:
        return 0.0
    b2 = beta * beta
    return (1.0 + b2) * p * r / (b2 * p + r)


def fbeta_from_pr(p: float, r: float, beta: float) -> float:
    if p == 0.0 and r == 0.0:
        return 0.0
    b2 = beta * beta
    return (1.0 + b2) * p * r / (b2 * p + r)


def _check_both_classes(y: np.ndarray) -> None:
    if y.all() or not y.any():
        raise SingleClassInput("need both target and non-target samples")


def roc_curve(scores: Sequence[float], labels) -> RocCurve:
    """ROC with one point per distinct score (ties move together).

    Starts at (0, 0) with an infinite threshold and ends at (1, 1) at the
    minimum score; thresholds are strictly decreasing along the curve.
    """
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    if len(scores) == 0:
        raise EmptyInput("no samples")
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool_labels(labels)
    _check_both_classes(y)

    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    points = [RocPoint(fpr=0.0, tpr=0.0, threshold=math.inf)]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        points.append(
            RocPoint(
                fpr=float(np.sum(pred & ~y)) / n_neg,
                tpr=float(np.sum(pred & y)) / n_pos,
                threshold=float(t),
            )
        )
    return RocCurve(points=tuple(points))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the (fpr, tpr) polyline."""
    fpr = np.array([p.fpr for p in curve.points])
    tpr = np.array([p.tpr for p in curve.points])
    return float(np.trapezoid(tpr, fpr))


def optimize_threshold(scores: Sequence[float], labels, beta: float = 2.0) -> ThresholdResult:
    """Exhaustive sweep for the F_beta-optimal threshold.

    Candidates are the distinct scores plus 0 and 1; ties break toward
    the smallest threshold, which favors recall.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool_labels(labels)
    if len(s) == 0:
        raise EmptyInput("no samples")
    _check_both_classes(y)

    candidates = np.unique(np.concatenate([s, [0.0, 1.0]]))
    best = None
    for t in candidates:  # ascending, so ties keep the smallest t
        c = confusion(s, y, float(t))
        f = fbeta(c, beta)
        if best is None or f > best[0] + 1e-15:
            best = (f, float(t), c)
    f, t, c = best
    return ThresholdResult(
        threshold=t,
        confusion=c,
        accuracy=accuracy(c),
        precision=precision(c),
        recall=recall(c),
        fbeta=f,
    )


def threshold_sweep(scores: Sequence[float], labels, beta: float = 2.0) -> list:
    """Metrics at every candidate threshold, for reporting."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_bool_labels(labels)
    rows = []
    for t in np.unique(np.concatenate([s, [0.0, 1.0]])):
        c = confusion(s, y, float(t))
        rows.append(
            {
                "threshold": float(t),
                "accuracy": accuracy(c),
                "precision": precision(c),
                "recall": recall(c),
                "fbeta": fbeta(c, beta),
            }
        )
    return rows
